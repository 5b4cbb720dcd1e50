#include "kae/model.hpp"

#include <cstring>
#include <fstream>
#include <utility>

namespace kae {

namespace {

constexpr char kMagic[4] = {'K', 'A', 'E', 'W'};
constexpr std::uint32_t kVersion = 1;

void check_column(const ad::Value& v, int want, const char* who) {
  const auto& s = v.val().shape();
  if (s.size() != 2 || s[0] != want || s[1] != 1)
    throw DataError(std::string(who) + ": expected a {" + std::to_string(want) +
                    ",1} column, got " + v.val().shape_str());
}

void check_size(const std::vector<double>& v, int want, const char* who) {
  if (static_cast<int>(v.size()) != want)
    throw DataError(std::string(who) + ": expected " + std::to_string(want) +
                    " entries, got " + std::to_string(v.size()));
}

}  // namespace

void ModelConfig::validate() const {
  if (channels < 1 || height < 1 || width < 1)
    throw ConfigError("model: state extents must be positive");
  if (hidden < 1) throw ConfigError("model: hidden width must be positive");
  if (nz < 1) throw ConfigError("model: nz must be positive");
}

void init_model(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  init_dense(ps, "enc_p", cfg.encoder_widths(), rng);
  init_dense(ps, "enc_h", cfg.encoder_widths(), rng);
  init_dense(ps, "dec", cfg.decoder_widths(), rng);
}

std::int64_t model_param_count(const ModelConfig& cfg) {
  cfg.validate();
  return 2 * dense_param_count(cfg.encoder_widths()) +
         dense_param_count(cfg.decoder_widths());
}

ad::Value encode_graph(ad::Tape& tape, const ParamStore& ps,
                       const ModelConfig& cfg, ad::Value x_t, ad::Value x_prev,
                       bool linear_mode) {
  check_column(x_t, cfg.n_d(), "encode");
  check_column(x_prev, cfg.n_d(), "encode");
  ad::Value u = dense_graph(tape, ps, "enc_p", cfg.encoder_widths(), x_t,
                            linear_mode);
  ad::Value v = dense_graph(tape, ps, "enc_h", cfg.encoder_widths(), x_prev,
                            linear_mode);
  return ad::scale(u + v, 0.5);
}

ad::Value encode_present_graph(ad::Tape& tape, const ParamStore& ps,
                               const ModelConfig& cfg, ad::Value x,
                               bool linear_mode) {
  check_column(x, cfg.n_d(), "encode_present");
  return dense_graph(tape, ps, "enc_p", cfg.encoder_widths(), x, linear_mode);
}

ad::Value decode_graph(ad::Tape& tape, const ParamStore& ps,
                       const ModelConfig& cfg, ad::Value z, bool linear_mode) {
  check_column(z, cfg.nz, "decode");
  return dense_graph(tape, ps, "dec", cfg.decoder_widths(), z, linear_mode);
}

std::vector<double> encode_plain(const ParamStore& ps, const ModelConfig& cfg,
                                 const std::vector<double>& x_t,
                                 const std::vector<double>& x_prev,
                                 bool linear_mode) {
  check_size(x_t, cfg.n_d(), "encode");
  check_size(x_prev, cfg.n_d(), "encode");
  std::vector<double> u =
      dense_plain(ps, "enc_p", cfg.encoder_widths(), x_t, linear_mode);
  std::vector<double> v =
      dense_plain(ps, "enc_h", cfg.encoder_widths(), x_prev, linear_mode);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = 0.5 * (u[i] + v[i]);
  return u;
}

std::vector<double> encode_present_plain(const ParamStore& ps,
                                         const ModelConfig& cfg,
                                         const std::vector<double>& x,
                                         bool linear_mode) {
  check_size(x, cfg.n_d(), "encode_present");
  return dense_plain(ps, "enc_p", cfg.encoder_widths(), x, linear_mode);
}

std::vector<double> decode_plain(const ParamStore& ps, const ModelConfig& cfg,
                                 const std::vector<double>& z,
                                 bool linear_mode) {
  check_size(z, cfg.nz, "decode");
  return dense_plain(ps, "dec", cfg.decoder_widths(), z, linear_mode);
}

// ---- checkpoint io ----

namespace {

void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename T>
void put(std::ofstream& f, T v) {
  put_bytes(f, &v, sizeof v);
}

void get_bytes(std::ifstream& f, void* p, std::size_t n, const char* what) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(f.gcount()) != n)
    throw DataError(std::string("checkpoint: truncated while reading ") + what);
}
template <typename T>
T get(std::ifstream& f, const char* what) {
  T v;
  get_bytes(f, &v, sizeof v, what);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const std::string& config_snapshot) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  put_bytes(f, kMagic, sizeof kMagic);
  put<std::uint32_t>(f, kVersion);
  put<std::uint64_t>(f, ps.size());
  for (const std::string& name : ps.names()) {
    const Tensor& t = ps.at(name);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
    put_bytes(f, name.data(), name.size());
    put<std::uint8_t>(f, t.requires_grad ? 1 : 0);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t d : t.shape()) put<std::int64_t>(f, d);
    put_bytes(f, t.values().data(), sizeof(double) * t.values().size());
  }
  put<std::uint64_t>(f, config_snapshot.size());
  put_bytes(f, config_snapshot.data(), config_snapshot.size());
  f.flush();
  if (!f) throw DataError("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  get_bytes(f, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError("checkpoint: bad magic in '" + path + "'");
  const auto version = get<std::uint32_t>(f, "version");
  if (version != kVersion)
    throw DataError("checkpoint: unsupported format version " +
                    std::to_string(version) + " (supported: " +
                    std::to_string(kVersion) + ")");
  Checkpoint out;
  const auto count = get<std::uint64_t>(f, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(f, "name length");
    std::string name(name_len, '\0');
    get_bytes(f, name.data(), name_len, "name");
    const auto req = get<std::uint8_t>(f, "grad flag");
    const auto rank = get<std::uint32_t>(f, "rank");
    std::vector<std::int64_t> shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape[r] = get<std::int64_t>(f, "dimension");
      if (shape[r] < 1 || numel > (1LL << 40) / std::max<std::int64_t>(shape[r], 1))
        throw DataError("checkpoint: implausible tensor shape for '" + name + "'");
      numel *= shape[r];
    }
    std::vector<double> data(static_cast<std::size_t>(numel));
    get_bytes(f, data.data(), sizeof(double) * data.size(), "tensor values");
    Tensor t(std::move(shape), std::move(data));
    t.requires_grad = (req != 0);
    out.params.add(name, std::move(t));
  }
  const auto snap_len = get<std::uint64_t>(f, "snapshot length");
  out.config_snapshot.resize(snap_len);
  get_bytes(f, out.config_snapshot.data(), snap_len, "snapshot");
  return out;
}

}  // namespace kae
