#include "kae/koopman.hpp"

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

namespace kae {

using linalg::Matrix;

Scheme parse_scheme(const std::string& s) {
  if (s == "euler") return Scheme::euler;
  if (s == "rk4") return Scheme::rk4;
  if (s == "midpoint") return Scheme::midpoint;
  if (s == "exp") return Scheme::expm;
  throw ConfigError("unknown scheme '" + s +
                    "' (expected euler|rk4|midpoint|exp)");
}

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::euler: return "euler";
    case Scheme::rk4: return "rk4";
    case Scheme::midpoint: return "midpoint";
    case Scheme::expm: return "exp";
  }
  throw ConfigError("scheme_name: invalid scheme value");
}

void KoopmanConfig::validate() const {
  if (nz < 1) throw ConfigError("operator: nz must be positive");
  if (rank < 1) throw ConfigError("operator: rank must be positive");
  if (rank > nz) throw ConfigError("operator: rank must not exceed nz");
  if (hyper_hidden < 1) throw ConfigError("operator: hyper_hidden must be positive");
  embed.validate();
}

namespace {

double softplus_scalar(double x) {
  return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

void check_latent_dim(const Matrix& k, const std::vector<double>& z,
                      const char* who) {
  if (k.rows() != k.cols()) throw DataError(std::string(who) + ": K not square");
  if (static_cast<int>(z.size()) != k.rows())
    throw DataError(std::string(who) + ": latent dimension mismatch");
}

}  // namespace

void init_operator(ParamStore& ps, const KoopmanConfig& cfg, Rng& rng) {
  cfg.validate();
  const int nz = cfg.nz, r = cfg.rank;

  Tensor s({nz, nz});
  const double s_scale = 0.5 / std::sqrt(static_cast<double>(nz));
  for (std::int64_t i = 0; i < s.numel(); ++i)
    s.data()[i] = rng.normal(0.0, s_scale);
  s.requires_grad = true;
  ps.add("op/S", std::move(s));

  Tensor d({nz, 1});
  for (std::int64_t i = 0; i < d.numel(); ++i)
    d.data()[i] = -2.0 + rng.normal(0.0, 0.05);
  d.requires_grad = true;
  ps.add("op/d", std::move(d));

  Tensor a({r, nz});
  const double a_scale = 1.0 / std::sqrt(static_cast<double>(nz));
  for (std::int64_t i = 0; i < a.numel(); ++i)
    a.data()[i] = rng.normal(0.0, a_scale);
  a.requires_grad = true;
  ps.add("op/A", std::move(a));

  Tensor b({nz, r});
  const double b_scale = 1.0 / std::sqrt(static_cast<double>(r));
  for (std::int64_t i = 0; i < b.numel(); ++i)
    b.data()[i] = rng.normal(0.0, b_scale);
  b.requires_grad = true;
  ps.add("op/B", std::move(b));

  init_dense(ps, "op/hyper", cfg.hyper_widths(), rng, /*zero_final=*/false,
             /*final_scale=*/1e-2);
}

Matrix koopman_core(const ParamStore& ps, const KoopmanConfig& cfg) {
  cfg.validate();
  const int nz = cfg.nz;
  const Tensor& s = ps.at("op/S");
  const Tensor& d = ps.at("op/d");
  if (s.numel() != static_cast<std::int64_t>(nz) * nz || d.numel() != nz)
    throw DataError("operator: stored tensor shapes do not match config");
  Matrix k(nz, nz);
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nz; ++j)
      k(i, j) = 0.5 * (s.values()[static_cast<std::size_t>(i) * nz + j] -
                       s.values()[static_cast<std::size_t>(j) * nz + i]);
  for (int i = 0; i < nz; ++i)
    k(i, i) -= softplus_scalar(d.values()[static_cast<std::size_t>(i)]);
  return k;
}

Matrix koopman_matrix(const ParamStore& ps, const KoopmanConfig& cfg,
                      double phi) {
  Matrix k = koopman_core(ps, cfg);
  const int nz = cfg.nz, r = cfg.rank;
  const std::vector<double> feat = embed_params(phi, cfg.embed);
  const std::vector<double> h =
      dense_plain(ps, "op/hyper", cfg.hyper_widths(), feat);
  const double gate = h[static_cast<std::size_t>(r)];
  const Tensor& a = ps.at("op/A");
  const Tensor& b = ps.at("op/B");
  for (int i = 0; i < nz; ++i)
    for (int j = 0; j < nz; ++j) {
      double acc = 0.0;
      for (int q = 0; q < r; ++q)
        acc += b.values()[static_cast<std::size_t>(i) * r + q] *
               h[static_cast<std::size_t>(q)] *
               a.values()[static_cast<std::size_t>(q) * nz + j];
      k(i, j) += gate * acc;
    }
  return k;
}

std::vector<double> step_euler(const Matrix& k, const std::vector<double>& z,
                               double dt) {
  check_latent_dim(k, z, "step_euler");
  std::vector<double> kz = linalg::matvec(k, z);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] + dt * kz[i];
  return out;
}

std::vector<double> step_rk4(const Matrix& k, const std::vector<double>& z,
                             double dt) {
  check_latent_dim(k, z, "step_rk4");
  const std::size_t n = z.size();
  std::vector<double> k1 = linalg::matvec(k, z);
  std::vector<double> tmp(n);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + 0.5 * dt * k1[i];
  std::vector<double> k2 = linalg::matvec(k, tmp);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + 0.5 * dt * k2[i];
  std::vector<double> k3 = linalg::matvec(k, tmp);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = z[i] + dt * k3[i];
  std::vector<double> k4 = linalg::matvec(k, tmp);
  std::vector<double> out(n);
  const double w = dt / 6.0;
  for (std::size_t i = 0; i < n; ++i)
    out[i] = z[i] + w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

std::vector<double> step_implicit_midpoint(const Matrix& k,
                                           const std::vector<double>& z,
                                           double dt) {
  check_latent_dim(k, z, "step_implicit_midpoint");
  const int n = k.rows();
  Matrix lhs(n, n);
  const double a = 0.5 * dt;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) lhs(i, j) = (i == j ? 1.0 : 0.0) - a * k(i, j);
  std::vector<double> kz = linalg::matvec(k, z);
  std::vector<double> rhs(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) rhs[i] = z[i] + a * kz[i];
  return linalg::solve_linear(lhs, rhs);
}

std::vector<double> step_plain(const Matrix& k, const std::vector<double>& z,
                               double dt, Scheme s) {
  switch (s) {
    case Scheme::euler: return step_euler(k, z, dt);
    case Scheme::rk4: return step_rk4(k, z, dt);
    case Scheme::midpoint: return step_implicit_midpoint(k, z, dt);
    case Scheme::expm: {
      check_latent_dim(k, z, "step_plain");
      return linalg::matrix_exp_action(k, dt, z);
    }
  }
  throw ConfigError("step_plain: invalid scheme value");
}

std::vector<std::vector<double>> rollout_plain(const Matrix& k,
                                               const std::vector<double>& z0,
                                               double dt, int steps, Scheme s) {
  if (steps < 1) throw ConfigError("rollout: steps must be >= 1");
  check_latent_dim(k, z0, "rollout");
  std::vector<std::vector<double>> traj;
  traj.reserve(static_cast<std::size_t>(steps));
  std::vector<double> z = z0;
  for (int j = 1; j <= steps; ++j) {
    z = step_plain(k, z, dt, s);
    for (double v : z)
      if (!std::isfinite(v))
        throw NumericError("rollout: non-finite state at step " +
                           std::to_string(j));
    traj.push_back(z);
  }
  return traj;
}

std::vector<std::vector<double>> rollout_exp(const Matrix& k,
                                             const std::vector<double>& z0,
                                             const std::vector<double>& times) {
  check_latent_dim(k, z0, "rollout_exp");
  if (times.empty()) throw ConfigError("rollout_exp: no times requested");
  double prev = 0.0;
  for (double t : times) {
    if (!(t > prev))
      throw ConfigError("rollout_exp: times must be strictly increasing and positive");
    prev = t;
  }
  std::vector<std::vector<double>> traj;
  traj.reserve(times.size());
  for (double t : times) traj.push_back(linalg::matrix_exp_action(k, t, z0));
  return traj;
}

// ---- tape side ----

OperatorGraph operator_graph(ad::Tape& tape, const ParamStore& ps,
                             const KoopmanConfig& cfg, double phi,
                             Rng* noise_rng) {
  cfg.validate();
  OperatorGraph og;
  og.nz = cfg.nz;
  og.rank = cfg.rank;
  og.s = param_leaf(tape, ps, "op/S");
  og.diss = ad::softplus(param_leaf(tape, ps, "op/d"));
  og.a = param_leaf(tape, ps, "op/A");
  og.b = param_leaf(tape, ps, "op/B");

  const std::vector<double> feat = embed_params(phi, cfg.embed, noise_rng);
  ad::Value fv = tape.constant(Tensor({cfg.embed.dim(), 1}, feat));
  ad::Value h = dense_graph(tape, ps, "op/hyper", cfg.hyper_widths(), fv);
  og.scales = ad::slice(h, 0, 0, cfg.rank);
  og.gate = ad::slice(h, 0, cfg.rank, 1);
  return og;
}

ad::Value apply_generator(ad::Tape& tape, const OperatorGraph& og, ad::Value z) {
  const std::int64_t nz = og.nz;
  ad::Value sz = ad::matmul(og.s, z);
  ad::Value zrow = ad::reshape(z, {1, nz});
  ad::Value stz = ad::reshape(ad::matmul(zrow, og.s), {nz, 1});
  ad::Value skew = ad::scale(sz - stz, 0.5);
  ad::Value dis = og.diss * z;
  ad::Value az = ad::matmul(og.a, z);
  ad::Value corr = ad::matmul(ad::matmul(og.b, og.scales * az), og.gate);
  (void)tape;
  return (skew - dis) + corr;
}

ad::Value step_graph(ad::Tape& tape, const OperatorGraph& og, ad::Value z,
                     double dt, Scheme s, int midpoint_iters) {
  switch (s) {
    case Scheme::euler:
      return z + ad::scale(apply_generator(tape, og, z), dt);
    case Scheme::rk4: {
      ad::Value k1 = apply_generator(tape, og, z);
      ad::Value k2 =
          apply_generator(tape, og, z + ad::scale(k1, 0.5 * dt));
      ad::Value k3 =
          apply_generator(tape, og, z + ad::scale(k2, 0.5 * dt));
      ad::Value k4 = apply_generator(tape, og, z + ad::scale(k3, dt));
      ad::Value incr = k1 + ad::scale(k2, 2.0) + ad::scale(k3, 2.0) + k4;
      return z + ad::scale(incr, dt / 6.0);
    }
    case Scheme::midpoint: {
      if (midpoint_iters < 1)
        throw ConfigError("step_graph: midpoint_iters must be >= 1");
      ad::Value y = z;
      for (int it = 0; it < midpoint_iters; ++it) {
        ad::Value mid = ad::scale(z + y, 0.5);
        y = z + ad::scale(apply_generator(tape, og, mid), dt);
      }
      return y;
    }
    case Scheme::expm:
      throw ConfigError(
          "step_graph: the exponential path is inference-only; use "
          "rollout_exp on the assembled matrix");
  }
  throw ConfigError("step_graph: invalid scheme value");
}

std::vector<ad::Value> rollout_graph(ad::Tape& tape, const OperatorGraph& og,
                                     ad::Value z0, double dt, int steps,
                                     Scheme s, int midpoint_iters) {
  if (steps < 1) throw ConfigError("rollout: steps must be >= 1");
  std::vector<ad::Value> traj;
  traj.reserve(static_cast<std::size_t>(steps));
  ad::Value z = z0;
  for (int j = 1; j <= steps; ++j) {
    try {
      z = step_graph(tape, og, z, dt, s, midpoint_iters);
    } catch (const NumericError& e) {
      throw NumericError("rollout: non-finite state at step " +
                         std::to_string(j) + ": " + e.what());
    }
    traj.push_back(z);
  }
  return traj;
}

}  // namespace kae
