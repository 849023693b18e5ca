#include "arcd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "arcd/error.hpp"
#include "arcd/tensor_io.hpp"

namespace arcd {

namespace {

constexpr char kMagic[4] = {'A', 'R', 'C', 'K'};
constexpr std::uint8_t kVersion = 1;

void put_string(std::ostream& os, const std::string& s) {
  if (s.size() > 0xFFFF) throw ContractError("checkpoint string too long");
  const auto n = static_cast<std::uint16_t>(s.size());
  os.write(reinterpret_cast<const char*>(&n), 2);
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto at = static_cast<std::uint64_t>(is.tellg());
  std::uint16_t n = 0;
  is.read(reinterpret_cast<char*>(&n), 2);
  if (is.gcount() != 2) throw ParseError("truncated checkpoint", at);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (is.gcount() != n) throw ParseError("truncated checkpoint string", at + 2);
  return s;
}

std::uint64_t position(std::istream& is) { return static_cast<std::uint64_t>(is.tellg()); }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1") return true;
  if (v == "0") return false;
  throw ParseError("checkpoint config: bad value for " + key, 0);
}

void open_header(std::istream& is) {
  char magic[5];
  is.read(magic, 5);
  if (is.gcount() < 4 || std::memcmp(magic, kMagic, 4) != 0) throw ParseError("not a checkpoint (bad magic)", 0);
  if (is.gcount() < 5 || static_cast<std::uint8_t>(magic[4]) != kVersion) throw ParseError("unsupported checkpoint version", 4);
}

}  // namespace

std::string encode_config(const CheckpointInfo& info) {
  const auto& a = info.ablation;
  const auto& c = info.arch;
  std::ostringstream os;
  os << "channels=" << c.channels[0] << "," << c.channels[1] << "," << c.channels[2] << "," << c.channels[3]
     << ";texture_channels=" << c.texture_channels << ";review_channels=" << c.review_channels
     << ";se_reduction=" << c.se_reduction << ";fam_gate=" << a.use_fam_gate << ";oue=" << a.use_oue
     << ";uncertainty_fusion=" << a.use_uncertainty_aware_fusion << ";krm=" << a.use_krm
     << ";conflict_attention=" << a.use_conflict_attention << ";reverse_attention=" << a.use_reverse_attention
     << ";uncertainty_supervision="
     << (a.uncertainty_supervision == UncertaintySupervision::boundary ? "boundary" : "prediction_error")
     << ";iteration=" << info.iteration;
  return os.str();
}

CheckpointInfo decode_config(const std::string& text) {
  CheckpointInfo info;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint config: malformed entry '" + item + "'", 0);
    const std::string k = item.substr(0, eq), v = item.substr(eq + 1);
    auto& a = info.ablation;
    auto& c = info.arch;
    if (k == "channels") {
      std::istringstream cs(v);
      std::string part;
      for (int i = 0; i < 4; ++i) {
        if (!std::getline(cs, part, ',')) throw ParseError("checkpoint config: bad channels", 0);
        c.channels[i] = std::stoi(part);
      }
    } else if (k == "texture_channels") c.texture_channels = std::stoi(v);
    else if (k == "review_channels") c.review_channels = std::stoi(v);
    else if (k == "se_reduction") c.se_reduction = std::stoi(v);
    else if (k == "fam_gate") a.use_fam_gate = parse_bool(k, v);
    else if (k == "oue") a.use_oue = parse_bool(k, v);
    else if (k == "uncertainty_fusion") a.use_uncertainty_aware_fusion = parse_bool(k, v);
    else if (k == "krm") a.use_krm = parse_bool(k, v);
    else if (k == "conflict_attention") a.use_conflict_attention = parse_bool(k, v);
    else if (k == "reverse_attention") a.use_reverse_attention = parse_bool(k, v);
    else if (k == "uncertainty_supervision") {
      if (v == "boundary") a.uncertainty_supervision = UncertaintySupervision::boundary;
      else if (v == "prediction_error") a.uncertainty_supervision = UncertaintySupervision::prediction_error;
      else throw ParseError("checkpoint config: bad uncertainty_supervision", 0);
    } else if (k == "iteration") info.iteration = std::stoll(v);
    else throw ParseError("checkpoint config: unknown key " + k, 0);
  }
  return info;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ARCDNet<T>& model, std::int64_t iteration) {
  std::ostringstream os;
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  put_string(os, encode_config({model.arch(), model.ablation(), iteration}));
  auto set = model.parameters();
  for (const auto& p : set.params) {
    put_string(os, p.name);
    write_arct(os, p.value);
  }
  put_string(os, "");
  std::int64_t channels = 0;
  for (const auto& n : set.norms) channels += static_cast<std::int64_t>(n.stats->mean.size());
  std::vector<T> stats;
  stats.reserve(static_cast<std::size_t>(2 * channels));
  for (const auto& n : set.norms) stats.insert(stats.end(), n.stats->mean.begin(), n.stats->mean.end());
  for (const auto& n : set.norms) stats.insert(stats.end(), n.stats->var.begin(), n.stats->var.end());
  write_arct(os, Tensor<T>(Shape{2, std::max<std::int64_t>(channels, 1)},
                           channels ? std::move(stats) : std::vector<T>{T(0), T(1)}));
  write_file_atomic(path, os.str());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  open_header(is);
  return decode_config(get_string(is));
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ARCDNet<T>& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  open_header(is);
  decode_config(get_string(is));

  auto set = model.parameters();
  std::vector<Tensor<T>> loaded;
  for (const auto& p : set.params) {
    const std::string name = get_string(is);
    if (name != p.name)
      throw MismatchError("parameter " + p.name + ": checkpoint has " + (name.empty() ? "no more parameters" : name));
    auto t = read_arct<T>(is, position(is));
    if (t.shape() != p.value.shape())
      throw MismatchError("parameter " + p.name + ": shape " + to_string(t.shape()) + " vs model " +
                          to_string(p.value.shape()));
    loaded.push_back(std::move(t));
  }
  const std::string extra = get_string(is);
  if (!extra.empty()) throw MismatchError("parameter " + extra + ": not present in the model");

  std::int64_t channels = 0;
  for (const auto& n : set.norms) channels += static_cast<std::int64_t>(n.stats->mean.size());
  auto stats = read_arct<T>(is, position(is));
  if (stats.shape() != Shape{2, std::max<std::int64_t>(channels, 1)})
    throw MismatchError("normalization statistics: shape " + to_string(stats.shape()));

  for (std::size_t i = 0; i < loaded.size(); ++i) {
    auto dst = set.params[i].value.mutable_data();
    auto src = loaded[i].data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  const auto s = stats.data();
  std::size_t off = 0;
  for (const auto& n : set.norms) {
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(off), n.stats->mean.size(), n.stats->mean.begin());
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(channels + off), n.stats->var.size(), n.stats->var.begin());
    off += n.stats->mean.size();
  }
}

template <typename T>
ARCDNet<T> load_model(const std::filesystem::path& path) {
  const auto info = read_checkpoint_info(path);
  ARCDNet<T> model(info.arch, info.ablation, 0);
  load_checkpoint(path, model);
  return model;
}

template void save_checkpoint(const std::filesystem::path&, ARCDNet<float>&, std::int64_t);
template void save_checkpoint(const std::filesystem::path&, ARCDNet<double>&, std::int64_t);
template void load_checkpoint(const std::filesystem::path&, ARCDNet<float>&);
template void load_checkpoint(const std::filesystem::path&, ARCDNet<double>&);
template ARCDNet<float> load_model<float>(const std::filesystem::path&);
template ARCDNet<double> load_model<double>(const std::filesystem::path&);

}  // namespace arcd
