#include "dcm/train/checkpoint.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "dcm/common/error.hpp"
#include "dcm/common/random.hpp"
#include "dcm/data/dataset.hpp"

namespace dcm::train {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'C', 'M', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  template <typename V>
  void put_span(std::span<const V> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size_bytes());
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  template <typename V>
  void get_span(std::span<V> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  CheckpointError error(const std::string& what) const {
    return CheckpointError(fmt::format("{}: {} (offset {})", source_, what, pos_));
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw error("truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

void put_metrics(Writer& w, const NetMetrics& m) {
  for (double v : {m.loss_total, m.loss_c, m.loss_ds, m.loss_dcm1, m.loss_dcm2, m.test_top1,
                   m.test_top5}) {
    w.put(v);
  }
}

NetMetrics get_metrics(Reader& r) {
  NetMetrics m;
  for (double* v : {&m.loss_total, &m.loss_c, &m.loss_ds, &m.loss_dcm1, &m.loss_dcm2,
                    &m.test_top1, &m.test_top5}) {
    *v = r.get<double>();
  }
  return m;
}

}  // namespace

template <typename T>
void checkpoint_save(const TrainState<T>& state, const std::filesystem::path& path) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  w.put(static_cast<std::uint64_t>(state.epoch));
  w.put(state.iteration);
  w.put(state.seed);
  for (const auto& n : state.nets) {
    const auto tensors = n.tensors();
    w.put(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      w.put_string(t.name);
      w.put(static_cast<std::uint32_t>(t.tensor.shape().rank()));
      for (auto d : t.tensor.shape().dims()) w.put(static_cast<std::uint64_t>(d));
      w.put_span(t.tensor.values());
    }
  }
  for (const auto& opt : state.optimizers) {
    w.put(static_cast<std::uint32_t>(opt.velocity.size()));
    for (const auto& v : opt.velocity) {
      w.put(static_cast<std::uint64_t>(v.size()));
      w.put_span(std::span<const T>(v));
    }
  }
  w.put(static_cast<std::uint64_t>(state.history.size()));
  for (const auto& row : state.history) {
    w.put(static_cast<std::uint64_t>(row.epoch));
    w.put(row.lr);
    for (const auto& m : row.nets) put_metrics(w, m);
  }
  w.put(fnv1a64({reinterpret_cast<const char*>(w.bytes.data()), w.bytes.size()}));

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(fmt::format("{}: cannot open for writing", tmp.string()));
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw CheckpointError(fmt::format("{}: write failed", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
TrainState<T> checkpoint_load(const std::filesystem::path& path, const TrainState<T>& like) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = data::read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  Reader r(bytes, path.string());
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw r.error("bad magic or unsupported version");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != fnv1a64({reinterpret_cast<const char*>(bytes.data()), bytes.size() - 8})) {
    throw r.error("checksum mismatch");
  }
  Reader body(std::span<const std::uint8_t>(bytes).first(bytes.size() - 8), path.string());
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) body.get<char>();
  if (const auto width = body.get<std::uint32_t>(); width != sizeof(T)) {
    throw body.error(fmt::format("stored with {}-byte scalars, expected {}", width, sizeof(T)));
  }

  TrainState<T> s;
  s.epoch = body.get<std::uint64_t>();
  s.iteration = body.get<std::uint64_t>();
  s.seed = body.get<std::uint64_t>();
  for (std::size_t k = 0; k < 2; ++k) {
    s.nets[k] = like.nets[k].clone();
    const auto tensors = s.nets[k].tensors();
    if (body.get<std::uint32_t>() != tensors.size()) {
      throw body.error(fmt::format("network {} tensor count differs", k + 1));
    }
    for (auto t : tensors) {
      const auto name = body.get_string();
      if (name != t.name) {
        throw body.error(fmt::format("expected tensor '{}', found '{}'", t.name, name));
      }
      const auto rank = body.get<std::uint32_t>();
      std::vector<std::size_t> dims(rank);
      for (auto& d : dims) d = static_cast<std::size_t>(body.get<std::uint64_t>());
      if (rank == 0 || ag::Shape(dims) != t.tensor.shape()) {
        throw body.error(fmt::format("tensor '{}' has a different shape", name));
      }
      body.get_span(t.tensor.mutable_values());
    }
  }
  for (std::size_t k = 0; k < 2; ++k) {
    s.optimizers[k] = like.optimizers[k];
    auto& vel = s.optimizers[k].velocity;
    if (body.get<std::uint32_t>() != vel.size()) {
      throw body.error(fmt::format("optimizer {} buffer count differs", k + 1));
    }
    for (auto& v : vel) {
      if (body.get<std::uint64_t>() != v.size()) {
        throw body.error(fmt::format("optimizer {} buffer length differs", k + 1));
      }
      body.get_span(std::span<T>(v));
    }
  }
  const auto rows = body.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < rows; ++i) {
    EpochMetrics row;
    row.epoch = static_cast<std::size_t>(body.get<std::uint64_t>());
    row.lr = body.get<double>();
    for (auto& m : row.nets) m = get_metrics(body);
    s.history.push_back(row);
  }
  if (body.position() != bytes.size() - 8) throw body.error("trailing bytes");
  return s;
}

template void checkpoint_save<float>(const TrainState<float>&, const std::filesystem::path&);
template void checkpoint_save<double>(const TrainState<double>&, const std::filesystem::path&);
template TrainState<float> checkpoint_load<float>(const std::filesystem::path&,
                                                  const TrainState<float>&);
template TrainState<double> checkpoint_load<double>(const std::filesystem::path&,
                                                    const TrainState<double>&);

}  // namespace dcm::train
