#include "kae/loss.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "kae/common.hpp"

namespace kae {

namespace {

using ad::Tape;
using ad::Value;

void check_same_shape(const Value& a, const Value& b, const char* where) {
  if (!a.val().same_shape(b.val()))
    throw DataError(std::string(where) + ": shape mismatch, " +
                    a.val().shape_str() + " vs " + b.val().shape_str());
}

void check_grid(const Value& v, const char* where, int min_extent) {
  if (v.val().rank() != 2)
    throw DataError(std::string(where) + ": expected a 2-D grid, got " +
                    v.val().shape_str());
  if (v.val().shape()[0] < min_extent || v.val().shape()[1] < min_extent)
    throw DataError(std::string(where) + ": grid extents must be >= " +
                    std::to_string(min_extent) + ", got " +
                    v.val().shape_str());
}

int checked_channels(const Value& x, int channels, const char* where) {
  if (channels < 1)
    throw ConfigError(std::string(where) + ": channels must be >= 1, got " +
                      std::to_string(channels));
  if (x.val().numel() % channels != 0)
    throw DataError(std::string(where) + ": " +
                    std::to_string(x.val().numel()) +
                    " elements do not split into " + std::to_string(channels) +
                    " channels");
  return channels;
}

}  // namespace

TemporalMode parse_temporal_mode(const std::string& name) {
  if (name == "uniform") return TemporalMode::uniform;
  if (name == "cosine") return TemporalMode::cosine;
  throw ConfigError("unknown temporal weight mode '" + name +
                    "' (expected uniform|cosine)");
}

const char* temporal_mode_name(TemporalMode mode) {
  return mode == TemporalMode::uniform ? "uniform" : "cosine";
}

void LossWeights::validate() const {
  const struct {
    const char* name;
    double v;
  } entries[] = {{"alpha", alpha},
                 {"beta", beta},
                 {"lambda_phys", lambda_phys},
                 {"w_cos", w_cos},
                 {"w_sobolev_time", w_sobolev_time},
                 {"w_sobolev_space", w_sobolev_space},
                 {"w_spectral", w_spectral}};
  for (const auto& e : entries)
    if (!(e.v >= 0.0))
      throw ConfigError(std::string("loss weight ") + e.name +
                        " must be >= 0, got " + std::to_string(e.v));
}

std::vector<double> cosine_weights(int n) {
  if (n < 2)
    throw ConfigError("cosine_weights: need a horizon of at least 2, got " +
                      std::to_string(n));
  std::vector<double> w(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    w[static_cast<std::size_t>(j)] =
        0.5 * (1.0 + std::cos(M_PI * j / (n - 1.0)));
    total += w[static_cast<std::size_t>(j)];
  }
  for (double& v : w) v /= total;
  return w;
}

std::vector<double> temporal_weights(TemporalMode mode, int n) {
  if (mode == TemporalMode::cosine) return cosine_weights(n);
  if (n < 1)
    throw ConfigError("temporal_weights: need a horizon of at least 1, got " +
                      std::to_string(n));
  return std::vector<double>(static_cast<std::size_t>(n), 1.0 / n);
}

Value loss_recon(Tape& tape, Value xhat, Value x, int channels) {
  (void)tape;
  check_same_shape(xhat, x, "loss_recon");
  checked_channels(x, channels, "loss_recon");
  return ad::scale(ad::mse(xhat, x), static_cast<double>(channels));
}

Value loss_pred(Tape& tape, const std::vector<Value>& xhat,
                const std::vector<Value>& x,
                const std::vector<double>& weights, int channels) {
  if (xhat.size() != x.size() || xhat.size() != weights.size())
    throw DataError("loss_pred: got " + std::to_string(xhat.size()) +
                    " predictions, " + std::to_string(x.size()) +
                    " targets and " + std::to_string(weights.size()) +
                    " weights");
  if (xhat.empty()) throw DataError("loss_pred: empty horizon");
  Value acc;
  for (std::size_t j = 0; j < xhat.size(); ++j) {
    Value term =
        ad::scale(loss_recon(tape, xhat[j], x[j], channels), weights[j]);
    acc = (j == 0) ? term : acc + term;
  }
  return acc;
}

Value loss_latent_consistency(Tape& tape, const std::vector<Value>& zhat,
                              const std::vector<Value>& targets) {
  (void)tape;
  if (zhat.size() != targets.size())
    throw DataError("loss_latent_consistency: got " +
                    std::to_string(zhat.size()) + " predictions for " +
                    std::to_string(targets.size()) + " targets");
  if (zhat.empty()) throw DataError("loss_latent_consistency: empty horizon");
  Value acc;
  for (std::size_t j = 0; j < zhat.size(); ++j) {
    check_same_shape(zhat[j], targets[j], "loss_latent_consistency");
    Value term = ad::sq_err(zhat[j], targets[j]);
    acc = (j == 0) ? term : acc + term;
  }
  return acc;
}

Value loss_linearity(Tape& tape, const OperatorGraph& og, Value z_t,
                     Value z_next, double dt, Scheme s, int midpoint_iters) {
  if (!(dt > 0.0))
    throw ConfigError("loss_linearity: dt must be positive, got " +
                      std::to_string(dt));
  check_same_shape(z_t, z_next, "loss_linearity");
  Value fwd = step_graph(tape, og, z_t, dt, s, midpoint_iters);
  Value bwd = step_graph(tape, og, z_next, -dt, s, midpoint_iters);
  return ad::sq_err(fwd, z_next) + ad::sq_err(bwd, z_t);
}

double loss_linearity_plain(const linalg::Matrix& k,
                            const std::vector<double>& z_t,
                            const std::vector<double>& z_next, double dt,
                            Scheme s) {
  if (!(dt > 0.0))
    throw ConfigError("loss_linearity_plain: dt must be positive, got " +
                      std::to_string(dt));
  if (z_t.size() != z_next.size())
    throw DataError("loss_linearity_plain: latent sizes differ");
  std::vector<double> fwd = step_plain(k, z_t, dt, s);
  std::vector<double> bwd = step_plain(k, z_next, -dt, s);
  double acc = 0.0;
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    const double df = fwd[i] - z_next[i];
    const double db = bwd[i] - z_t[i];
    acc += df * df + db * db;
  }
  return acc;
}

Value loss_cosine_dir(Tape& tape, Value zhat, Value z) {
  check_same_shape(zhat, z, "loss_cosine_dir");
  Value den = ad::norm2(zhat) * ad::norm2(z) + tape.constant(1e-8);
  return tape.constant(1.0) - ad::dot(zhat, z) * ad::recip(den);
}

Value loss_energy(Tape& tape, Value z_t, Value z_next) {
  (void)tape;
  check_same_shape(z_t, z_next, "loss_energy");
  return ad::square(ad::norm2(z_next) - ad::norm2(z_t));
}

Value loss_sobolev_time(Tape& tape, const std::vector<Value>& xhat,
                        const std::vector<Value>& x) {
  (void)tape;
  if (xhat.size() != x.size())
    throw DataError("loss_sobolev_time: sequence lengths differ, " +
                    std::to_string(xhat.size()) + " vs " +
                    std::to_string(x.size()));
  if (xhat.size() < 2)
    throw DataError(
        "loss_sobolev_time: need at least two frames to difference");
  Value acc;
  for (std::size_t j = 0; j + 1 < xhat.size(); ++j) {
    check_same_shape(xhat[j], x[j], "loss_sobolev_time");
    check_same_shape(xhat[j + 1], x[j + 1], "loss_sobolev_time");
    Value dh = xhat[j + 1] - xhat[j];
    Value dx = x[j + 1] - x[j];
    Value term = ad::sq_err(dh, dx);
    acc = (j == 0) ? term : acc + term;
  }
  return ad::scale(acc, 1.0 / (static_cast<double>(xhat.size()) - 1.0));
}

namespace {

// forward differences along rows (axis 0) or columns (axis 1)
Value grid_diff(Value f, int axis) {
  const std::int64_t extent = f.val().shape()[static_cast<std::size_t>(axis)];
  return ad::slice(f, axis, 1, extent - 1) - ad::slice(f, axis, 0, extent - 1);
}

}  // namespace

Value loss_sobolev_space(Tape& tape, Value xhat, Value x) {
  (void)tape;
  check_grid(xhat, "loss_sobolev_space", 2);
  check_grid(x, "loss_sobolev_space", 2);
  check_same_shape(xhat, x, "loss_sobolev_space");
  return ad::sq_err(grid_diff(xhat, 0), grid_diff(x, 0)) +
         ad::sq_err(grid_diff(xhat, 1), grid_diff(x, 1));
}

namespace {

// Matrix form of the length-n forward DFT: entry (j, k) of the cosine and
// sine factors at angle 2*pi*jk/n, with jk reduced mod n to keep the angle
// accurate for large indices.
void dft_factors(int n, Tensor& c, Tensor& s) {
  c = Tensor({n, n});
  s = Tensor({n, n});
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) {
      const std::int64_t m =
          (static_cast<std::int64_t>(j) * k) % n;
      const double ang = 2.0 * M_PI * static_cast<double>(m) / n;
      c.at(j, k) = std::cos(ang);
      s.at(j, k) = std::sin(ang);
    }
}

}  // namespace

std::pair<Value, Value> dft2_graph(Tape& tape, Value f) {
  check_grid(f, "dft2_graph", 1);
  const int h = static_cast<int>(f.val().shape()[0]);
  const int w = static_cast<int>(f.val().shape()[1]);
  Tensor ch_t, sh_t, cw_t, sw_t;
  dft_factors(h, ch_t, sh_t);
  dft_factors(w, cw_t, sw_t);
  Value ch = tape.constant(ch_t), sh = tape.constant(sh_t);
  Value cw = tape.constant(cw_t), sw = tape.constant(sw_t);
  // (C_h - i S_h) f (C_w - i S_w) expanded over a real f
  Value re = ad::matmul(ad::matmul(ch, f), cw) -
             ad::matmul(ad::matmul(sh, f), sw);
  Value im = ad::scale(ad::matmul(ad::matmul(ch, f), sw) +
                           ad::matmul(ad::matmul(sh, f), cw),
                       -1.0);
  return {re, im};
}

Value loss_spectral(Tape& tape, Value xhat, Value x) {
  check_grid(xhat, "loss_spectral", 1);
  check_grid(x, "loss_spectral", 1);
  check_same_shape(xhat, x, "loss_spectral");
  auto [re_h, im_h] = dft2_graph(tape, xhat);
  auto [re_x, im_x] = dft2_graph(tape, x);
  Value amp_h = ad::sqrt(ad::square(re_h) + ad::square(im_h));
  Value amp_x = ad::sqrt(ad::square(re_x) + ad::square(im_x));
  Value l1 = ad::sum(ad::abs_val(amp_h - amp_x));
  return l1 + ad::sq_err(re_h, re_x) + ad::sq_err(im_h, im_x);
}

namespace {

Value term_or_zero(Tape& tape, Value v, double effective_weight,
                   const char* name) {
  if (v.valid()) return v;
  if (effective_weight > 0.0)
    throw ConfigError(std::string("loss_total: term '") + name +
                      "' was not built but its effective weight is positive");
  return tape.constant(0.0);
}

double scalar_or_zero(Value v) { return v.valid() ? v.scalar() : 0.0; }

}  // namespace

Value loss_total(Tape& tape, const LossTerms& terms, const LossWeights& w) {
  w.validate();
  Value recon = term_or_zero(tape, terms.recon, 1.0, "recon");
  Value pred = term_or_zero(tape, terms.pred, w.alpha, "pred");
  Value cons = term_or_zero(tape, terms.consistency, w.beta, "consistency");
  Value lin = term_or_zero(tape, terms.linearity, w.beta, "linearity");
  Value cosv = term_or_zero(tape, terms.cosine, w.beta * w.w_cos, "cosine");
  Value energy = term_or_zero(tape, terms.energy, w.beta, "energy");
  Value st = term_or_zero(tape, terms.sobolev_time,
                          w.lambda_phys * w.w_sobolev_time, "sobolev_time");
  Value ss = term_or_zero(tape, terms.sobolev_space,
                          w.lambda_phys * w.w_sobolev_space, "sobolev_space");
  Value sp = term_or_zero(tape, terms.spectral,
                          w.lambda_phys * w.w_spectral, "spectral");

  // association mirrors make_report exactly
  Value latent = cons + lin + ad::scale(cosv, w.w_cos) + energy;
  Value phys = ad::scale(st, w.w_sobolev_time) +
               ad::scale(ss, w.w_sobolev_space) + ad::scale(sp, w.w_spectral);
  return recon + ad::scale(pred, w.alpha) + ad::scale(latent, w.beta) +
         ad::scale(phys, w.lambda_phys);
}

LossReport make_report(const LossTerms& terms, const LossWeights& w) {
  LossReport r;
  r.recon = scalar_or_zero(terms.recon);
  r.pred = scalar_or_zero(terms.pred);
  r.consistency = scalar_or_zero(terms.consistency);
  r.linearity = scalar_or_zero(terms.linearity);
  r.cosine = scalar_or_zero(terms.cosine);
  r.energy = scalar_or_zero(terms.energy);
  r.sobolev_time = scalar_or_zero(terms.sobolev_time);
  r.sobolev_space = scalar_or_zero(terms.sobolev_space);
  r.spectral = scalar_or_zero(terms.spectral);
  r.latent = r.consistency + r.linearity + w.w_cos * r.cosine + r.energy;
  r.phys = w.w_sobolev_time * r.sobolev_time +
           w.w_sobolev_space * r.sobolev_space + w.w_spectral * r.spectral;
  r.total = recompute_total(r, w);
  return r;
}

double recompute_total(const LossReport& r, const LossWeights& w) {
  return r.recon + w.alpha * r.pred + w.beta * r.latent +
         w.lambda_phys * r.phys;
}

double frame_mse(const std::vector<double>& a, const std::vector<double>& b,
                 int channels) {
  if (a.size() != b.size())
    throw DataError("frame_mse: sizes differ, " + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()));
  if (channels < 1)
    throw ConfigError("frame_mse: channels must be >= 1, got " +
                      std::to_string(channels));
  if (a.empty() || a.size() % static_cast<std::size_t>(channels) != 0)
    throw DataError("frame_mse: " + std::to_string(a.size()) +
                    " elements do not split into " + std::to_string(channels) +
                    " channels");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc * channels / static_cast<double>(a.size());
}

}  // namespace kae
