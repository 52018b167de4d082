#include "dcm/autograd/shape.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <functional>
#include <numeric>

#include "dcm/common/error.hpp"

namespace dcm::ag {

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError(fmt::format("shape {} has a zero extent", str()));
  }
}

std::size_t Shape::numel() const noexcept {
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

std::string Shape::str() const { return fmt::format("[{}]", fmt::join(dims_, ",")); }

}  // namespace dcm::ag
