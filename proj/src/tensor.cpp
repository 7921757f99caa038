#include "dcn2/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dcn2 {

std::int64_t Dims::numel() const {
  if (n < 0 || c < 0 || h < 0 || w < 0) throw SizeError("negative extent in " + str());
  std::int64_t total = 1;
  for (std::int64_t e : {n, c, h, w}) {
    if (__builtin_mul_overflow(total, e, &total)) throw SizeError("element count overflows for " + str());
  }
  // Bytes must also be addressable.
  if (total > std::numeric_limits<std::int64_t>::max() / 8) {
    throw SizeError("element count overflows for " + str());
  }
  return total;
}

std::string Dims::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor alloc(Dims dims, float fill) { return Tensor(dims, fill); }

template <typename T>
void axpy_accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src, double scale) {
  if (dst.dims() != src.dims()) {
    throw ShapeError("axpy dims mismatch: " + dst.dims().str() + " vs " + src.dims().str());
  }
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] = static_cast<T>(static_cast<double>(d[i]) + scale * static_cast<double>(s[i]));
  }
}

template <typename T>
void axpy_accumulate(const TensorView<T>& dst, const TensorView<const T>& src, double scale) {
  const Dims dd = dst.dims();
  if (dd != src.dims()) {
    throw ShapeError("axpy view dims mismatch: " + dd.str() + " vs " + src.dims().str());
  }
  for (std::int64_t n = 0; n < dd.n; ++n)
    for (std::int64_t c = 0; c < dd.c; ++c)
      for (std::int64_t h = 0; h < dd.h; ++h)
        for (std::int64_t w = 0; w < dd.w; ++w) {
          T& out = dst.at(n, c, h, w);
          out = static_cast<T>(static_cast<double>(out) + scale * static_cast<double>(src.at(n, c, h, w)));
        }
}

template <typename T>
double sum(const BasicTensor<T>& t) {
  double acc = 0.0;
  for (T v : t.data()) acc += static_cast<double>(v);
  return acc;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) throw ShapeError("max_abs_diff dims mismatch: " + a.dims().str() + " vs " + b.dims().str());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    if (!(d <= m)) m = d;  // propagates NaN
  }
  return m;
}

template void axpy_accumulate<float>(BasicTensor<float>&, const BasicTensor<float>&, double);
template void axpy_accumulate<double>(BasicTensor<double>&, const BasicTensor<double>&, double);
template void axpy_accumulate<float>(const TensorView<float>&, const TensorView<const float>&, double);
template void axpy_accumulate<double>(const TensorView<double>&, const TensorView<const double>&, double);
template double sum<float>(const BasicTensor<float>&);
template double sum<double>(const BasicTensor<double>&);
template double max_abs_diff<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template double max_abs_diff<double>(const BasicTensor<double>&, const BasicTensor<double>&);

namespace {

constexpr char kMagic[8] = {'D', 'C', 'N', '2', 'T', 'E', 'N', 'S'};
constexpr std::size_t kHeaderBytes = 8 + 4 * 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> write_tensor(const Tensor& t) {
  const Dims& d = t.dims();
  for (std::int64_t e : {d.n, d.c, d.h, d.w}) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw SizeError("extent exceeds u32 in " + d.str());
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * static_cast<std::size_t>(t.size()));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  for (std::int64_t e : {d.n, d.c, d.h, d.w}) put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor read_tensor(std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < 8; ++i) {
    if (i >= bytes.size()) throw FormatError("truncated magic", bytes.size());
    if (bytes[i] != static_cast<std::uint8_t>(kMagic[i])) throw FormatError("bad magic", i);
  }
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated header", bytes.size());
  Dims d{get_u32(bytes, 8), get_u32(bytes, 12), get_u32(bytes, 16), get_u32(bytes, 20)};
  std::int64_t count = 0;
  try {
    count = d.numel();
  } catch (const SizeError&) {
    throw FormatError("extents " + d.str() + " overflow", 8);
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(count) * 4;
  const std::uint64_t available = bytes.size() - kHeaderBytes;
  if (available < payload) throw FormatError("truncated payload for extents " + d.str(), bytes.size());
  if (available > payload) {
    throw FormatError("trailing bytes after payload for extents " + d.str(), kHeaderBytes + payload);
  }
  Tensor t(d);
  auto data = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
  }
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  const auto bytes = write_tensor(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_tensor(bytes);
}

}  // namespace dcn2
