#include "kae/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

namespace kae {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Substream ids for per-epoch reseeding; arbitrary fixed constants.
constexpr std::uint64_t kShuffleStream = 0x5481ffe1u;
constexpr std::uint64_t kJitterStream = 0x71773e2au;

void check_positive(double v, const char* what) {
  if (!(v > 0.0))
    throw ConfigError(std::string("TrainConfig: ") + what + " must be > 0");
}

void check_nonneg(double v, const char* what) {
  if (!(v >= 0.0))
    throw ConfigError(std::string("TrainConfig: ") + what + " must be >= 0");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (horizon < 1) throw ConfigError("TrainConfig: horizon must be >= 1");
  if (stride < 1) throw ConfigError("TrainConfig: stride must be >= 1");
  if (warmup_epochs < 0)
    throw ConfigError("TrainConfig: warmup_epochs must be >= 0");
  if (warmup_epochs >= epochs)
    throw ConfigError("TrainConfig: warm-up (" + std::to_string(warmup_epochs) +
                      ") must be shorter than the run (" +
                      std::to_string(epochs) + " epochs)");
  check_positive(lr_peak, "lr_peak");
  check_positive(lr_final, "lr_final");
  if (!(lr_final <= lr_peak))
    throw ConfigError("TrainConfig: lr_final must not exceed lr_peak");
  if (!(beta1 >= 0.0 && beta1 < 1.0))
    throw ConfigError("TrainConfig: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("TrainConfig: beta2 must lie in [0, 1)");
  check_positive(adam_eps, "adam_eps");
  check_nonneg(weight_decay, "weight_decay");
  check_nonneg(grad_clip, "grad_clip");
  check_nonneg(stability_weight, "stability_weight");
  if (threads < 0) throw ConfigError("TrainConfig: threads must be >= 0");
  if (stop_epoch < -1 || stop_epoch > epochs)
    throw ConfigError("TrainConfig: stop_epoch must be -1 or in [0, epochs]");
  weights.validate();
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  cfg.validate();
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigError("lr_schedule: epoch " + std::to_string(epoch) +
                      " outside [0, " + std::to_string(cfg.epochs) + ")");
  // epoch == warmup_epochs lands here with ratio exactly 1, so the peak is
  // hit bit-for-bit rather than through the cosine's a + (b - a) detour.
  if (cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs)
    return cfg.lr_peak *
           (static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs));
  const int denom = cfg.epochs - 1 - cfg.warmup_epochs;
  const double progress =
      denom > 0
          ? static_cast<double>(epoch - cfg.warmup_epochs) / denom
          : 1.0;
  return cfg.lr_final +
         (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + std::cos(kPi * progress));
}

void init_optimizer(AdamWState& st, const ParamStore& ps) {
  st.m.clear();
  st.v.clear();
  st.m.reserve(ps.size());
  st.v.reserve(ps.size());
  for (const std::string& name : ps.names()) {
    st.m.push_back(Tensor(ps.at(name).shape()));
    st.v.push_back(Tensor(ps.at(name).shape()));
  }
  st.step = 0;
}

bool decayed_param(const std::string& name) {
  if (name == "op/S" || name == "op/A" || name == "op/B") return true;
  const std::size_t pos = name.rfind("/W");
  if (pos == std::string::npos) return false;
  // "<prefix>/W<digits>" only; rejects names that merely contain "/W".
  if (pos + 2 >= name.size()) return false;
  for (std::size_t i = pos + 2; i < name.size(); ++i)
    if (name[i] < '0' || name[i] > '9') return false;
  return true;
}

void optimizer_step(ParamStore& ps, const std::vector<Tensor>& grads,
                    AdamWState& st, const TrainConfig& cfg, double lr) {
  const std::vector<std::string>& names = ps.names();
  if (grads.size() != names.size())
    throw ConfigError("optimizer_step: " + std::to_string(grads.size()) +
                      " gradients for " + std::to_string(names.size()) +
                      " parameters");
  if (st.m.size() != names.size() || st.v.size() != names.size())
    throw ConfigError("optimizer_step: state does not match the store; call "
                      "init_optimizer first");
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw ConfigError("optimizer_step: learning rate must be finite and >= 0");
  // Scan everything before touching anything, so a poisoned batch cannot
  // leave the parameters half-updated.
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!grads[i].same_shape(ps.at(names[i])))
      throw DataError("optimizer_step: gradient shape " + grads[i].shape_str() +
                      " does not match parameter " + names[i]);
    if (!grads[i].all_finite())
      throw NumericError("optimizer_step: non-finite gradient for " +
                         names[i]);
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor& p = ps.at(names[i]);
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    const bool decay = cfg.weight_decay > 0.0 && decayed_param(names[i]);
    const std::int64_t n = p.numel();
    for (std::int64_t e = 0; e < n; ++e) {
      m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
      v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
      const double mhat = m[e] / bc1;
      const double vhat = v[e] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (decay) update += cfg.weight_decay * p[e];
      p[e] -= lr * update;
    }
  }
}

int resolve_threads(int configured) {
  if (configured < 0)
    throw ConfigError("threads must be >= 0, got " +
                      std::to_string(configured));
  if (configured >= 1) return configured;
  const char* env = std::getenv("KAE_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long parsed = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || parsed < 1 || parsed > 4096)
    throw ConfigError(std::string("KAE_THREADS must be a positive integer, "
                                  "got '") +
                      env + "'");
  return static_cast<int>(parsed);
}

namespace {

// frame column {n_d,1} -> channel c as an {h,w} grid.
ad::Value channel_grid(ad::Value frame, int c, int channels, int h, int w) {
  ad::Value rows = ad::reshape(
      frame, {channels, static_cast<std::int64_t>(h) * w});
  return ad::reshape(ad::slice(rows, 0, c, 1), {h, w});
}

}  // namespace

WindowObjective window_objective(ad::Tape& tape, const ParamStore& ps,
                                 const ModelConfig& mcfg,
                                 const KoopmanConfig& kcfg,
                                 const TrainConfig& tcfg,
                                 const TrajectoryDataset& ds,
                                 const WindowBatch& w, double phi_jitter) {
  const std::int64_t nd = mcfg.n_d();
  if (ds.frame_size() != nd)
    throw ConfigError("window_objective: dataset frame size " +
                      std::to_string(ds.frame_size()) +
                      " does not match the model's " + std::to_string(nd));
  const int horizon = tcfg.horizon;
  if (static_cast<int>(w.targets.size()) != horizon)
    throw ConfigError("window_objective: window carries " +
                      std::to_string(w.targets.size()) +
                      " targets for horizon " + std::to_string(horizon));
  if (w.context.size() != 2)
    throw ConfigError("window_objective: expected 2 context frames");

  auto frame_const = [&](const double* p) {
    return tape.constant(Tensor({nd, 1}, std::vector<double>(p, p + nd)));
  };

  const LossWeights& lw = tcfg.weights;
  const bool phys_time = lw.lambda_phys > 0.0 && lw.w_sobolev_time > 0.0;
  const bool phys_space = lw.lambda_phys > 0.0 && lw.w_sobolev_space > 0.0;
  const bool phys_spec = lw.lambda_phys > 0.0 && lw.w_spectral > 0.0;
  const bool any_phys = phys_time || phys_space || phys_spec;
  const bool need_rollout = lw.alpha > 0.0 || lw.beta > 0.0 || any_phys;
  const bool need_decoded = lw.alpha > 0.0 || any_phys;
  const bool need_op = need_rollout || tcfg.stability_weight > 0.0;

  ad::Value x_prev = frame_const(w.context[0]);
  ad::Value x_t = frame_const(w.context[1]);
  std::vector<ad::Value> targets;
  targets.reserve(horizon);
  for (int j = 0; j < horizon; ++j) targets.push_back(frame_const(w.targets[j]));

  ad::Value z_t = encode_graph(tape, ps, mcfg, x_t, x_prev);
  ad::Value xhat_t = decode_graph(tape, ps, mcfg, z_t);

  LossTerms terms;
  terms.recon = loss_recon(tape, xhat_t, x_t, mcfg.channels);

  OperatorGraph og;
  if (need_op) og = operator_graph(tape, ps, kcfg, w.phi + phi_jitter, nullptr);

  std::vector<ad::Value> zs;
  std::vector<ad::Value> xhats;
  if (need_rollout) {
    zs = rollout_graph(tape, og, z_t, ds.dt, horizon, tcfg.scheme);
    if (need_decoded) {
      xhats.reserve(horizon);
      for (const ad::Value& z : zs)
        xhats.push_back(decode_graph(tape, ps, mcfg, z));
    }
  }

  if (lw.alpha > 0.0)
    terms.pred = loss_pred(tape, xhats, targets,
                           temporal_weights(lw.temporal, horizon),
                           mcfg.channels);

  if (lw.beta > 0.0) {
    std::vector<ad::Value> tz;
    tz.reserve(horizon);
    for (int j = 0; j < horizon; ++j) {
      ad::Value e = encode_present_graph(tape, ps, mcfg, targets[j]);
      if (tcfg.detach_targets) e = ad::stop_grad(e);
      tz.push_back(e);
    }
    terms.consistency = loss_latent_consistency(tape, zs, tz);
    terms.linearity =
        loss_linearity(tape, og, z_t, tz[0], ds.dt, tcfg.scheme);
    if (lw.w_cos > 0.0) {
      ad::Value acc = loss_cosine_dir(tape, zs[0], tz[0]);
      for (int j = 1; j < horizon; ++j)
        acc = acc + loss_cosine_dir(tape, zs[j], tz[j]);
      terms.cosine = ad::scale(acc, 1.0 / horizon);
    }
    // Norm drift along the predicted path, the first hop included; averaged
    // so the term does not grow with the horizon.
    ad::Value prev = z_t;
    ad::Value acc;
    for (int j = 0; j < horizon; ++j) {
      ad::Value e = loss_energy(tape, prev, zs[j]);
      acc = acc.valid() ? acc + e : e;
      prev = zs[j];
    }
    terms.energy = ad::scale(acc, 1.0 / horizon);
  }

  if (any_phys) {
    std::vector<ad::Value> dec_seq;
    std::vector<ad::Value> ref_seq;
    dec_seq.reserve(horizon + 1);
    ref_seq.reserve(horizon + 1);
    dec_seq.push_back(xhat_t);
    ref_seq.push_back(x_t);
    for (int j = 0; j < horizon; ++j) {
      dec_seq.push_back(xhats[j]);
      ref_seq.push_back(targets[j]);
    }
    if (phys_time)
      terms.sobolev_time = loss_sobolev_time(tape, dec_seq, ref_seq);
    if (phys_space || phys_spec) {
      ad::Value space_acc;
      ad::Value spec_acc;
      for (std::size_t f = 0; f < dec_seq.size(); ++f) {
        for (int c = 0; c < mcfg.channels; ++c) {
          ad::Value gh =
              channel_grid(dec_seq[f], c, mcfg.channels, mcfg.height,
                           mcfg.width);
          ad::Value gr =
              channel_grid(ref_seq[f], c, mcfg.channels, mcfg.height,
                           mcfg.width);
          if (phys_space) {
            ad::Value t = loss_sobolev_space(tape, gh, gr);
            space_acc = space_acc.valid() ? space_acc + t : t;
          }
          if (phys_spec) {
            ad::Value t = loss_spectral(tape, gh, gr);
            spec_acc = spec_acc.valid() ? spec_acc + t : t;
          }
        }
      }
      // mean over frames, channels summed
      const double inv_frames = 1.0 / static_cast<double>(dec_seq.size());
      if (phys_space) terms.sobolev_space = ad::scale(space_acc, inv_frames);
      if (phys_spec) terms.spectral = ad::scale(spec_acc, inv_frames);
    }
  }

  WindowObjective out;
  out.terms = terms;
  out.total = loss_total(tape, terms, lw);
  if (tcfg.stability_weight > 0.0) {
    // ||gate * B diag(c) A||_F^2. The per-rank scales spread across columns
    // through a ones row, so no diagonal primitive is needed.
    ad::Value ones_row = tape.constant(
        Tensor({1, og.nz}, std::vector<double>(static_cast<std::size_t>(og.nz),
                                               1.0)));
    ad::Value a_scaled = ad::mul(ad::matmul(og.scales, ones_row), og.a);
    ad::Value corr = ad::matmul(og.b, a_scaled);
    ad::Value g2 = ad::square(ad::reshape(og.gate, {1}));
    out.stability = ad::mul(g2, ad::sum(ad::square(corr)));
    out.total = out.total + ad::scale(out.stability, tcfg.stability_weight);
    out.stability_value = out.stability.scalar();
  }
  out.report = make_report(terms, lw);
  return out;
}

namespace {

struct WindowResult {
  std::vector<Tensor> grads;
  LossReport report;
  double stability = 0.0;
};

void add_into(std::vector<Tensor>& acc, const std::vector<Tensor>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const std::int64_t n = acc[i].numel();
    for (std::int64_t e = 0; e < n; ++e) acc[i][e] += g[i][e];
  }
}

void accumulate_report(LossReport& acc, const LossReport& r) {
  acc.recon += r.recon;
  acc.pred += r.pred;
  acc.consistency += r.consistency;
  acc.linearity += r.linearity;
  acc.cosine += r.cosine;
  acc.energy += r.energy;
  acc.sobolev_time += r.sobolev_time;
  acc.sobolev_space += r.sobolev_space;
  acc.spectral += r.spectral;
  acc.latent += r.latent;
  acc.phys += r.phys;
  acc.total += r.total;
}

void scale_report(LossReport& r, double s) {
  r.recon *= s;
  r.pred *= s;
  r.consistency *= s;
  r.linearity *= s;
  r.cosine *= s;
  r.energy *= s;
  r.sobolev_time *= s;
  r.sobolev_space *= s;
  r.spectral *= s;
  r.latent *= s;
  r.phys *= s;
  r.total *= s;
}

[[noreturn]] void rethrow_with_context(std::exception_ptr ep,
                                       const std::string& ctx) {
  try {
    std::rethrow_exception(ep);
  } catch (const NumericError& e) {
    throw NumericError(ctx + e.what());
  } catch (const DataError& e) {
    throw DataError(ctx + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + e.what());
  }
  // anything else propagates from rethrow_exception unchanged
}

}  // namespace

MetricsRecord train(const TrajectoryDataset& ds, ParamStore& ps,
                    const ModelConfig& mcfg, const KoopmanConfig& kcfg,
                    const TrainConfig& tcfg, TrainState& state) {
  mcfg.validate();
  kcfg.validate();
  tcfg.validate();
  ds.validate();
  if (ds.channels != mcfg.channels || ds.height != mcfg.height ||
      ds.width != mcfg.width)
    throw ConfigError("train: dataset frames are " +
                      std::to_string(ds.channels) + "x" +
                      std::to_string(ds.height) + "x" +
                      std::to_string(ds.width) + " but the model expects " +
                      std::to_string(mcfg.channels) + "x" +
                      std::to_string(mcfg.height) + "x" +
                      std::to_string(mcfg.width));
  if (kcfg.nz != mcfg.nz)
    throw ConfigError("train: operator latent size " +
                      std::to_string(kcfg.nz) +
                      " does not match the autoencoder's " +
                      std::to_string(mcfg.nz));
  if (state.next_epoch < 0 || state.next_epoch > tcfg.epochs)
    throw ConfigError("train: resume epoch " +
                      std::to_string(state.next_epoch) + " outside [0, " +
                      std::to_string(tcfg.epochs) + "]");

  const std::vector<WindowBatch> windows =
      sliding_windows(ds, 2, tcfg.horizon, tcfg.stride);
  if (windows.empty())
    throw ConfigError(
        "train: no windows; trajectories of length " +
        std::to_string(ds.t_len) + " cannot fit 2 context frames plus " +
        std::to_string(tcfg.horizon) + " targets");

  const int n_threads = resolve_threads(tcfg.threads);
  const std::vector<std::string>& names = ps.names();
  if (state.opt.m.empty() && state.opt.v.empty() && state.opt.step == 0)
    init_optimizer(state.opt, ps);
  else if (state.opt.m.size() != names.size() ||
           state.opt.v.size() != names.size())
    throw ConfigError("train: optimizer state does not match the store");

  const bool jitter_on = kcfg.embed.noise_std > 0.0;
  const int end_epoch =
      tcfg.stop_epoch < 0 ? tcfg.epochs : std::min(tcfg.epochs,
                                                   tcfg.stop_epoch);
  MetricsRecord rec;

  for (int epoch = state.next_epoch; epoch < end_epoch; ++epoch) {
    const double lr = lr_schedule(tcfg, epoch);

    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(tcfg.seed, kShuffleStream, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    Rng jitter_rng(derive_seed(tcfg.seed, kJitterStream, epoch));

    LossReport epoch_sum;
    double stab_sum = 0.0;
    int seen = 0;

    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += tcfg.batch_size) {
      const std::size_t batch_end =
          std::min(order.size(),
                   batch_start + static_cast<std::size_t>(tcfg.batch_size));
      const int bn = static_cast<int>(batch_end - batch_start);
      const int batch_index =
          static_cast<int>(batch_start /
                           static_cast<std::size_t>(tcfg.batch_size));

      // Jitter draws happen on the sequential path so that thread count can
      // never influence any random stream.
      std::vector<double> jit(static_cast<std::size_t>(bn), 0.0);
      if (jitter_on)
        for (int k = 0; k < bn; ++k)
          jit[k] = jitter_rng.normal(0.0, kcfg.embed.noise_std);

      std::vector<WindowResult> results(static_cast<std::size_t>(bn));
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(bn));

      auto run_window = [&](int k) {
        const WindowBatch& w = windows[order[batch_start + k]];
        try {
          ad::Tape tape;
          tape.reserve(512);
          WindowObjective obj =
              window_objective(tape, ps, mcfg, kcfg, tcfg, ds, w, jit[k]);
          tape.backward(obj.total);
          WindowResult& out = results[k];
          out.grads.reserve(names.size());
          for (const std::string& name : names)
            out.grads.push_back(tape.has_leaf(name)
                                    ? tape.grad(name)
                                    : Tensor(ps.at(name).shape()));
          out.report = obj.report;
          out.stability = obj.stability_value;
        } catch (...) {
          errors[k] = std::current_exception();
        }
      };

      if (n_threads <= 1 || bn == 1) {
        for (int k = 0; k < bn; ++k) run_window(k);
      } else {
        std::atomic<int> next{0};
        const int width = std::min(n_threads, bn);
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(width));
        for (int t = 0; t < width; ++t)
          pool.emplace_back([&]() {
            for (int k = next.fetch_add(1); k < bn; k = next.fetch_add(1))
              run_window(k);
          });
        for (std::thread& t : pool) t.join();
      }

      for (int k = 0; k < bn; ++k) {
        if (!errors[k]) continue;
        const WindowBatch& w = windows[order[batch_start + k]];
        rethrow_with_context(
            errors[k], "epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ", window (trajectory " +
                           std::to_string(w.trajectory) + ", start " +
                           std::to_string(w.start) + "): ");
      }

      // Reduce in batch position order regardless of which thread produced
      // what; floating-point sums stay identical across widths.
      std::vector<Tensor> grads;
      grads.reserve(names.size());
      for (const std::string& name : names)
        grads.push_back(Tensor(ps.at(name).shape()));
      for (int k = 0; k < bn; ++k) {
        add_into(grads, results[k].grads);
        accumulate_report(epoch_sum, results[k].report);
        stab_sum += results[k].stability;
      }
      seen += bn;
      const double inv = 1.0 / static_cast<double>(bn);
      for (Tensor& g : grads)
        for (std::int64_t e = 0; e < g.numel(); ++e) g[e] *= inv;

      if (tcfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const Tensor& g : grads)
          for (std::int64_t e = 0; e < g.numel(); ++e) sq += g[e] * g[e];
        const double norm = std::sqrt(sq);
        if (norm > tcfg.grad_clip) {
          const double s = tcfg.grad_clip / norm;
          for (Tensor& g : grads)
            for (std::int64_t e = 0; e < g.numel(); ++e) g[e] *= s;
        }
      }

      try {
        optimizer_step(ps, grads, state.opt, tcfg, lr);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + ": " + e.what());
      }
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.windows = seen;
    em.mean = epoch_sum;
    scale_report(em.mean, 1.0 / static_cast<double>(seen));
    em.stability = stab_sum / static_cast<double>(seen);
    rec.epochs.push_back(em);
    state.next_epoch = epoch + 1;
  }
  return rec;
}

EvalMetrics evaluate(const TrajectoryDataset& ds, const ParamStore& ps,
                     const ModelConfig& mcfg, const KoopmanConfig& kcfg,
                     int horizon, Scheme scheme, int stride) {
  mcfg.validate();
  kcfg.validate();
  ds.validate();
  if (horizon < 1) throw ConfigError("evaluate: horizon must be >= 1");
  if (ds.channels != mcfg.channels || ds.height != mcfg.height ||
      ds.width != mcfg.width)
    throw ConfigError("evaluate: dataset frame layout does not match model");
  if (kcfg.nz != mcfg.nz)
    throw ConfigError("evaluate: operator latent size " +
                      std::to_string(kcfg.nz) +
                      " does not match the autoencoder's " +
                      std::to_string(mcfg.nz));
  const std::vector<WindowBatch> windows =
      sliding_windows(ds, 2, horizon, stride);
  if (windows.empty())
    throw ConfigError("evaluate: no windows of horizon " +
                      std::to_string(horizon) + " fit trajectories of length " +
                      std::to_string(ds.t_len));

  using clock = std::chrono::steady_clock;
  const std::int64_t nd = ds.frame_size();

  EvalMetrics em;
  em.horizon = horizon;
  em.scheme = scheme;
  em.per_step_mse.assign(static_cast<std::size_t>(horizon), 0.0);
  em.persistence_mse.assign(static_cast<std::size_t>(horizon), 0.0);

  std::vector<double> times(static_cast<std::size_t>(horizon));
  for (int j = 0; j < horizon; ++j) times[j] = (j + 1) * ds.dt;

  double sum_rk4 = 0.0;
  double sum_exp = 0.0;

  for (const WindowBatch& w : windows) {
    const std::vector<double> x_prev(w.context[0], w.context[0] + nd);
    const std::vector<double> x_t(w.context[1], w.context[1] + nd);
    const std::vector<double> z0 = encode_plain(ps, mcfg, x_t, x_prev);
    const linalg::Matrix k = koopman_matrix(ps, kcfg, w.phi);

    auto t0 = clock::now();
    const auto lat_rk4 = rollout_plain(k, z0, ds.dt, horizon, Scheme::rk4);
    em.time_iterative_s +=
        std::chrono::duration<double>(clock::now() - t0).count();
    t0 = clock::now();
    const auto lat_exp = rollout_exp(k, z0, times);
    em.time_exp_s += std::chrono::duration<double>(clock::now() - t0).count();

    const auto* lat_scheme = &lat_rk4;
    std::vector<std::vector<double>> lat_other;
    if (scheme == Scheme::expm) {
      lat_scheme = &lat_exp;
    } else if (scheme != Scheme::rk4) {
      lat_other = rollout_plain(k, z0, ds.dt, horizon, scheme);
      lat_scheme = &lat_other;
    }

    for (int j = 0; j < horizon; ++j) {
      const std::vector<double> target(w.targets[j], w.targets[j] + nd);
      const std::vector<double> xh =
          decode_plain(ps, mcfg, (*lat_scheme)[j]);
      em.per_step_mse[j] += frame_mse(xh, target, mcfg.channels);
      em.persistence_mse[j] += frame_mse(x_t, target, mcfg.channels);

      const std::vector<double>& xh_rk4 =
          (lat_scheme == &lat_rk4) ? xh : decode_plain(ps, mcfg, lat_rk4[j]);
      sum_rk4 += frame_mse(xh_rk4, target, mcfg.channels);
      const std::vector<double>& xh_exp =
          (lat_scheme == &lat_exp) ? xh : decode_plain(ps, mcfg, lat_exp[j]);
      sum_exp += frame_mse(xh_exp, target, mcfg.channels);

      double diff_sq = 0.0;
      double ref_sq = 0.0;
      for (std::size_t e = 0; e < lat_exp[j].size(); ++e) {
        const double d = lat_rk4[j][e] - lat_exp[j][e];
        diff_sq += d * d;
        ref_sq += lat_exp[j][e] * lat_exp[j][e];
      }
      const double rel =
          std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-300);
      if (rel > em.max_latent_rel_exp_rk4) em.max_latent_rel_exp_rk4 = rel;
    }
  }

  const double inv_w = 1.0 / static_cast<double>(windows.size());
  for (int j = 0; j < horizon; ++j) {
    em.per_step_mse[j] *= inv_w;
    em.persistence_mse[j] *= inv_w;
    em.mean_mse += em.per_step_mse[j];
    em.mean_persistence += em.persistence_mse[j];
  }
  em.mean_mse /= horizon;
  em.mean_persistence /= horizon;
  const double inv_frames = inv_w / static_cast<double>(horizon);
  em.mse_rk4 = sum_rk4 * inv_frames;
  em.mse_exp = sum_exp * inv_frames;
  return em;
}

namespace {

// Column ids of the wide metrics table. Rows fill what applies to them and
// leave the rest empty, so one header serves epochs and evaluations alike.
enum Col {
  kKind,
  kEpoch,
  kStep,
  kScheme,
  kHorizon,
  kLr,
  kWindows,
  kTotal,
  kRecon,
  kPred,
  kConsistency,
  kLinearity,
  kCosine,
  kEnergy,
  kSobolevTime,
  kSobolevSpace,
  kSpectral,
  kLatent,
  kPhys,
  kStability,
  kMse,
  kPersistenceMse,
  kMeanMse,
  kMeanPersistence,
  kMseRk4,
  kMseExp,
  kMaxLatentRel,
  kTimeIterative,
  kTimeExp,
  kNumCols,
};

const char* const kColNames[kNumCols] = {
    "kind",          "epoch",         "step",
    "scheme",        "horizon",       "lr",
    "windows",       "total",         "recon",
    "pred",          "consistency",   "linearity",
    "cosine",        "energy",        "sobolev_time",
    "sobolev_space", "spectral",      "latent",
    "phys",          "stability",     "mse",
    "persistence_mse", "mean_mse",    "mean_persistence",
    "mse_rk4",       "mse_exp",       "max_latent_rel_exp_rk4",
    "time_iterative_s", "time_exp_s",
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void put_row(std::ofstream& f, const std::vector<std::string>& row) {
  for (int c = 0; c < kNumCols; ++c) {
    if (c) f << ',';
    f << row[c];
  }
  f << '\n';
}

}  // namespace

void write_metrics_csv(const MetricsRecord& rec, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("write_metrics_csv: cannot open " + path);
  for (int c = 0; c < kNumCols; ++c) {
    if (c) f << ',';
    f << kColNames[c];
  }
  f << '\n';
  for (const EpochMetrics& e : rec.epochs) {
    std::vector<std::string> row(kNumCols);
    row[kKind] = "epoch";
    row[kEpoch] = std::to_string(e.epoch);
    row[kLr] = fmt(e.lr);
    row[kWindows] = std::to_string(e.windows);
    const LossReport& r = e.mean;
    row[kTotal] = fmt(r.total);
    row[kRecon] = fmt(r.recon);
    row[kPred] = fmt(r.pred);
    row[kConsistency] = fmt(r.consistency);
    row[kLinearity] = fmt(r.linearity);
    row[kCosine] = fmt(r.cosine);
    row[kEnergy] = fmt(r.energy);
    row[kSobolevTime] = fmt(r.sobolev_time);
    row[kSobolevSpace] = fmt(r.sobolev_space);
    row[kSpectral] = fmt(r.spectral);
    row[kLatent] = fmt(r.latent);
    row[kPhys] = fmt(r.phys);
    row[kStability] = fmt(e.stability);
    put_row(f, row);
  }
  for (const EvalMetrics& ev : rec.evals) {
    const std::string scheme = scheme_name(ev.scheme);
    for (int j = 0; j < ev.horizon; ++j) {
      std::vector<std::string> row(kNumCols);
      row[kKind] = "eval-step";
      row[kStep] = std::to_string(j + 1);
      row[kScheme] = scheme;
      row[kHorizon] = std::to_string(ev.horizon);
      row[kMse] = fmt(ev.per_step_mse[j]);
      row[kPersistenceMse] = fmt(ev.persistence_mse[j]);
      put_row(f, row);
    }
    std::vector<std::string> row(kNumCols);
    row[kKind] = "eval-summary";
    row[kScheme] = scheme;
    row[kHorizon] = std::to_string(ev.horizon);
    row[kMeanMse] = fmt(ev.mean_mse);
    row[kMeanPersistence] = fmt(ev.mean_persistence);
    row[kMseRk4] = fmt(ev.mse_rk4);
    row[kMseExp] = fmt(ev.mse_exp);
    row[kMaxLatentRel] = fmt(ev.max_latent_rel_exp_rk4);
    row[kTimeIterative] = fmt(ev.time_iterative_s);
    row[kTimeExp] = fmt(ev.time_exp_s);
    put_row(f, row);
  }
  f.flush();
  if (!f) throw DataError("write_metrics_csv: write to " + path + " failed");
}

namespace {

const char kMomentM[] = "opt.m/";
const char kMomentV[] = "opt.v/";
const char kStepName[] = "opt/step";
const char kEpochName[] = "train/next_epoch";

bool has_prefix(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

}  // namespace

void save_train_checkpoint(const std::string& path, const ParamStore& ps,
                           const TrainState& st,
                           const std::string& config_snapshot) {
  const std::vector<std::string>& names = ps.names();
  if (st.opt.m.size() != names.size() || st.opt.v.size() != names.size())
    throw ConfigError("save_train_checkpoint: optimizer state does not match "
                      "the store");
  ParamStore all;
  for (const std::string& name : names) all.add(name, ps.at(name));
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor m = st.opt.m[i];
    m.requires_grad = false;
    all.add(kMomentM + names[i], std::move(m));
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor v = st.opt.v[i];
    v.requires_grad = false;
    all.add(kMomentV + names[i], std::move(v));
  }
  all.add(kStepName, Tensor::scalar(static_cast<double>(st.opt.step)));
  all.add(kEpochName, Tensor::scalar(static_cast<double>(st.next_epoch)));
  save_checkpoint(path, all, config_snapshot);
}

TrainCheckpoint load_train_checkpoint(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  TrainCheckpoint out;
  out.config_snapshot = c.config_snapshot;
  std::size_t packed = 0;
  for (const std::string& name : c.params.names()) {
    if (has_prefix(name, kMomentM) || has_prefix(name, kMomentV) ||
        name == kStepName || name == kEpochName) {
      ++packed;
      continue;
    }
    out.params.add(name, c.params.at(name));
  }
  if (packed == 0) {
    init_optimizer(out.state.opt, out.params);
    out.state.next_epoch = 0;
    return out;
  }
  const std::vector<std::string>& names = out.params.names();
  if (packed != 2 * names.size() + 2)
    throw DataError("load_train_checkpoint: " + path +
                    " carries a partial training state (" +
                    std::to_string(packed) + " packed tensors for " +
                    std::to_string(names.size()) + " parameters)");
  out.state.opt.m.reserve(names.size());
  out.state.opt.v.reserve(names.size());
  for (const std::string& name : names) {
    const std::string mn = kMomentM + name;
    const std::string vn = kMomentV + name;
    if (!c.params.has(mn) || !c.params.has(vn))
      throw DataError("load_train_checkpoint: optimizer state missing for " +
                      name);
    const Tensor& m = c.params.at(mn);
    const Tensor& v = c.params.at(vn);
    if (!m.same_shape(out.params.at(name)) ||
        !v.same_shape(out.params.at(name)))
      throw DataError("load_train_checkpoint: optimizer state shape differs "
                      "from parameter " +
                      name);
    out.state.opt.m.push_back(m);
    out.state.opt.v.push_back(v);
  }
  const double step = c.params.at(kStepName).values()[0];
  const double next_epoch = c.params.at(kEpochName).values()[0];
  if (!(step >= 0) || step != std::floor(step))
    throw DataError("load_train_checkpoint: invalid step counter");
  if (!(next_epoch >= 0) || next_epoch != std::floor(next_epoch))
    throw DataError("load_train_checkpoint: invalid epoch counter");
  out.state.opt.step = static_cast<std::int64_t>(step);
  out.state.next_epoch = static_cast<int>(next_epoch);
  return out;
}

}  // namespace kae
