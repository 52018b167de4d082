#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace dcm::ag {

/// Row-major tensor extents. Every extent is strictly positive.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::vector<std::size_t> dims);

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t numel() const noexcept;
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::string str() const;

  bool operator==(const Shape&) const = default;

 private:
  std::vector<std::size_t> dims_;
};

}  // namespace dcm::ag
