#include "kae/net.hpp"

#include <cmath>
#include <utility>

namespace kae {

int ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == name) return static_cast<int>(i);
  return -1;
}

void ParamStore::add(const std::string& name, Tensor t) {
  if (name.empty()) throw ConfigError("ParamStore: empty parameter name");
  if (index_of(name) >= 0)
    throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
  order_.push_back(name);
  tensors_.push_back(std::move(t));
}

bool ParamStore::has(const std::string& name) const {
  return index_of(name) >= 0;
}

Tensor& ParamStore::at(const std::string& name) {
  const int i = index_of(name);
  if (i < 0) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return tensors_[static_cast<std::size_t>(i)];
}

const Tensor& ParamStore::at(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return tensors_[static_cast<std::size_t>(i)];
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

ParamEmbedding ParamEmbedding::linspace(double lo, double hi, int count,
                                        double sigma_scale) {
  if (count < 2) throw ConfigError("ParamEmbedding: need at least 2 centers");
  if (!(hi > lo)) throw ConfigError("ParamEmbedding: need hi > lo");
  if (!(sigma_scale > 0.0))
    throw ConfigError("ParamEmbedding: sigma_scale must be positive");
  ParamEmbedding pe;
  const double step = (hi - lo) / static_cast<double>(count - 1);
  pe.centers.resize(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k)
    pe.centers[static_cast<std::size_t>(k)] = lo + step * static_cast<double>(k);
  pe.sigma = step * sigma_scale;
  return pe;
}

void ParamEmbedding::validate() const {
  if (centers.empty()) throw ConfigError("ParamEmbedding: no centers");
  for (std::size_t k = 1; k < centers.size(); ++k)
    if (!(centers[k] > centers[k - 1]))
      throw ConfigError("ParamEmbedding: centers must be strictly increasing");
  if (!(sigma > 0.0)) throw ConfigError("ParamEmbedding: sigma must be positive");
  if (noise_std < 0.0)
    throw ConfigError("ParamEmbedding: noise_std must be non-negative");
}

std::vector<double> embed_params(double phi, const ParamEmbedding& pe,
                                 Rng* noise_rng) {
  pe.validate();
  double p = phi;
  if (noise_rng != nullptr && pe.noise_std > 0.0)
    p += noise_rng->normal(0.0, pe.noise_std);
  std::vector<double> f(pe.centers.size());
  const double inv = 1.0 / (2.0 * pe.sigma * pe.sigma);
  for (std::size_t k = 0; k < pe.centers.size(); ++k) {
    const double d = p - pe.centers[k];
    f[k] = std::exp(-d * d * inv);
  }
  return f;
}

namespace {

void check_widths(const std::vector<int>& widths) {
  if (widths.size() < 2)
    throw ConfigError("dense stack: need at least input and output widths");
  for (int w : widths)
    if (w < 1) throw ConfigError("dense stack: widths must be positive");
}

std::string wname(const std::string& prefix, std::size_t i) {
  return prefix + "/W" + std::to_string(i);
}
std::string bname(const std::string& prefix, std::size_t i) {
  return prefix + "/b" + std::to_string(i);
}

}  // namespace

void init_dense(ParamStore& ps, const std::string& prefix,
                const std::vector<int>& widths, Rng& rng, bool zero_final,
                double final_scale) {
  check_widths(widths);
  const std::size_t layers = widths.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const int fan_in = widths[i];
    const int fan_out = widths[i + 1];
    const bool last = (i + 1 == layers);
    Tensor w({fan_out, fan_in});
    if (!(last && zero_final)) {
      double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      if (last) s *= final_scale;
      for (std::int64_t k = 0; k < w.numel(); ++k)
        w.data()[k] = rng.uniform(-s, s);
    }
    w.requires_grad = true;
    ps.add(wname(prefix, i), std::move(w));
    Tensor b({fan_out, 1});
    b.requires_grad = true;
    ps.add(bname(prefix, i), std::move(b));
  }
}

std::int64_t dense_param_count(const std::vector<int>& widths) {
  check_widths(widths);
  std::int64_t n = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    n += static_cast<std::int64_t>(widths[i + 1]) * (widths[i] + 1);
  return n;
}

ad::Value param_leaf(ad::Tape& tape, const ParamStore& ps,
                     const std::string& name) {
  if (tape.has_leaf(name)) return tape.leaf(name);
  return tape.input(name, ps.at(name), /*requires_grad=*/true);
}

ad::Value dense_graph(ad::Tape& tape, const ParamStore& ps,
                      const std::string& prefix, const std::vector<int>& widths,
                      ad::Value x, bool linear_mode) {
  check_widths(widths);
  const std::size_t layers = widths.size() - 1;
  ad::Value h = x;
  for (std::size_t i = 0; i < layers; ++i) {
    ad::Value w = param_leaf(tape, ps, wname(prefix, i));
    ad::Value b = param_leaf(tape, ps, bname(prefix, i));
    h = ad::matmul(w, h) + b;
    if (!linear_mode && i + 1 < layers) h = ad::silu(h);
  }
  return h;
}

std::vector<double> dense_plain(const ParamStore& ps, const std::string& prefix,
                                const std::vector<int>& widths,
                                const std::vector<double>& x,
                                bool linear_mode) {
  check_widths(widths);
  if (static_cast<int>(x.size()) != widths.front())
    throw DataError("dense stack: input size does not match first width");
  const std::size_t layers = widths.size() - 1;
  std::vector<double> h = x;
  for (std::size_t i = 0; i < layers; ++i) {
    const Tensor& w = ps.at(wname(prefix, i));
    const Tensor& b = ps.at(bname(prefix, i));
    const int rows = widths[i + 1], cols = widths[i];
    std::vector<double> out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      double acc = b.values()[static_cast<std::size_t>(r)];
      const double* wr = w.values().data() + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += wr[c] * h[static_cast<std::size_t>(c)];
      out[static_cast<std::size_t>(r)] = acc;
    }
    if (!linear_mode && i + 1 < layers) {
      // same branch-stable sigmoid as the tape's forward rule, so the two
      // paths agree to the last bit
      for (double& v : out) {
        double s;
        if (v >= 0.0) {
          s = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          s = e / (1.0 + e);
        }
        v = v * s;
      }
    }
    h = std::move(out);
  }
  return h;
}

}  // namespace kae
