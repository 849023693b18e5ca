#include "arcd/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "arcd/error.hpp"

namespace arcd {

namespace {

static_assert(std::endian::native == std::endian::little, "ARCT I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}

}  // namespace

template <typename T>
void write_arct(std::ostream& os, const Tensor<T>& tensor) {
  if (tensor.rank() > 255) throw ContractError("ARCT supports rank <= 255");
  os.write(kArctMagic, 4);
  os.put(static_cast<char>(kArctVersion));
  os.put(static_cast<char>(tensor.rank()));
  for (auto d : tensor.shape()) {
    if (d > 0xFFFFFFFFll) throw ContractError("ARCT dimension exceeds 32 bits");
    put_u32(os, static_cast<std::uint32_t>(d));
  }
  std::vector<float> values(tensor.data().begin(), tensor.data().end());
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  if (!os) throw IoError("failed writing ARCT record");
}

template <typename T>
Tensor<T> read_arct(std::istream& is, std::uint64_t base_offset) {
  char header[6];
  is.read(header, 6);
  if (is.gcount() < 4 || std::memcmp(header, kArctMagic, 4) != 0) throw ParseError("missing ARCT magic", base_offset);
  if (is.gcount() < 6) throw ParseError("truncated ARCT header", base_offset + static_cast<std::uint64_t>(is.gcount()));
  if (static_cast<std::uint8_t>(header[4]) != kArctVersion)
    throw ParseError("unsupported ARCT version " + std::to_string(static_cast<std::uint8_t>(header[4])),
                     base_offset + 4);
  const int rank = static_cast<std::uint8_t>(header[5]);
  Shape shape;
  std::uint64_t offset = base_offset + 6;
  for (int i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    is.read(reinterpret_cast<char*>(&d), 4);
    if (is.gcount() != 4) throw ParseError("truncated ARCT dimensions", offset);
    if (d == 0) throw ParseError("zero ARCT dimension", offset);
    shape.push_back(d);
    offset += 4;
  }
  const auto count = static_cast<std::size_t>(numel(shape));
  std::vector<float> values(count);
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * 4));
  if (static_cast<std::size_t>(is.gcount()) != count * 4)
    throw ParseError("truncated ARCT payload", offset + static_cast<std::uint64_t>(is.gcount()));
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

template <typename T>
void save_arct(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ostringstream os;
  write_arct(os, tensor);
  write_file_atomic(path, os.str());
}

template <typename T>
Tensor<T> load_arct(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_arct<T>(is);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template void write_arct(std::ostream&, const Tensor<float>&);
template void write_arct(std::ostream&, const Tensor<double>&);
template Tensor<float> read_arct<float>(std::istream&, std::uint64_t);
template Tensor<double> read_arct<double>(std::istream&, std::uint64_t);
template void save_arct(const std::filesystem::path&, const Tensor<float>&);
template void save_arct(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_arct<float>(const std::filesystem::path&);
template Tensor<double> load_arct<double>(const std::filesystem::path&);

}  // namespace arcd
