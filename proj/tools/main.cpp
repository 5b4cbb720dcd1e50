// kae: command-line workbench for the conditioned latent-dynamics engine.
// Subcommands: generate | train | eval | check-integrators | gradcheck.
// Every run prints its fully resolved configuration and writes the same text
// next to its outputs, so a result can always be traced to exact settings.
// Exit codes: 0 ok, 1 configuration, 2 data, 3 numerics.

#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "kae/common.hpp"
#include "kae/data.hpp"
#include "kae/koopman.hpp"
#include "kae/loss.hpp"
#include "kae/model.hpp"
#include "kae/net.hpp"
#include "kae/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kae;

namespace {

constexpr std::uint64_t kInitStream = 0x12177e11u;

struct RunConfig {
  std::string command;  // optional in the file; must match the subcommand
  std::uint64_t seed = 1;
  std::string out = "out";
  std::string scheme = "rk4";
  double tolerance = 1e-4;
  bool corrupt = false;  // gradcheck fault injection, test hook

  std::string ds_train;
  std::string ds_test;
  std::string checkpoint;  // empty: <out>/checkpoint.kaew

  std::string gen_kind;  // "linear-oracle" | "vortex-street"
  LinearOracleConfig oracle;
  VortexStreetConfig street;
  bool gen_seed_set = false;  // generator.seed falls back to the run seed

  int hidden = 256;
  int nz = 64;
  int rank = 4;
  int hyper_hidden = 16;
  double embed_lo = 0.0;
  double embed_hi = 1.0;
  int embed_count = 8;
  double embed_sigma_scale = 1.0;
  double noise_std = 0.0;

  TrainConfig train;
  int eval_horizon = 8;
  int eval_stride = 1;
};

// ---- config file access; unknown keys and wrong types are hard errors ----

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  std::set<std::string> ok;
  for (const char* k : allowed) ok.insert(k);
  for (const auto& item : obj.items())
    if (!ok.count(item.key()))
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

const json* sub_object(const json& obj, const std::string& where,
                       const char* key) {
  if (!obj.contains(key)) return nullptr;
  const json& v = obj.at(key);
  if (!v.is_object())
    throw ConfigError(where + "." + key + " must be an object");
  return &v;
}

double get_num(const json& obj, const std::string& where, const char* key,
               double dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number())
    throw ConfigError(where + "." + key + " must be a number");
  return v.get<double>();
}

int get_int(const json& obj, const std::string& where, const char* key,
            int dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number_integer())
    throw ConfigError(where + "." + key + " must be an integer");
  return v.get<int>();
}

std::uint64_t get_u64(const json& obj, const std::string& where,
                      const char* key, std::uint64_t dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.is_number_float() ||
      (v.is_number_integer() && !v.is_number_unsigned() &&
       v.get<std::int64_t>() < 0))
    throw ConfigError(where + "." + key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json& obj, const std::string& where, const char* key,
              bool dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_boolean())
    throw ConfigError(where + "." + key + " must be true or false");
  return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& where, const char* key,
                    const std::string& dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_string())
    throw ConfigError(where + "." + key + " must be a string");
  return v.get<std::string>();
}

void load_generator_block(const json& g, RunConfig& rc) {
  rc.gen_kind = get_str(g, "generator", "kind", "");
  if (rc.gen_kind.empty())
    throw ConfigError("generator.kind is required (linear-oracle or "
                      "vortex-street)");
  rc.gen_seed_set = g.contains("seed");
  if (rc.gen_kind == "linear-oracle") {
    reject_unknown(g, "generator",
                   {"kind", "seed", "nz_true", "n_d", "t_len", "dt", "n_traj",
                    "phi_lo", "phi_hi", "half_step_subsample"});
    LinearOracleConfig& c = rc.oracle;
    c.seed = get_u64(g, "generator", "seed", c.seed);
    c.nz_true = get_int(g, "generator", "nz_true", c.nz_true);
    c.n_d = get_int(g, "generator", "n_d", c.n_d);
    c.t_len = get_int(g, "generator", "t_len", c.t_len);
    c.dt = get_num(g, "generator", "dt", c.dt);
    c.n_traj = get_int(g, "generator", "n_traj", c.n_traj);
    c.phi_lo = get_num(g, "generator", "phi_lo", c.phi_lo);
    c.phi_hi = get_num(g, "generator", "phi_hi", c.phi_hi);
    c.half_step_subsample =
        get_bool(g, "generator", "half_step_subsample", c.half_step_subsample);
  } else if (rc.gen_kind == "vortex-street") {
    reject_unknown(g, "generator",
                   {"kind", "seed", "height", "width", "t_len", "dt", "n_traj",
                    "phi_lo", "phi_hi", "vortices_per_row", "core_width",
                    "strength", "advect0", "advect1", "decay0", "decay1",
                    "half_step_subsample"});
    VortexStreetConfig& c = rc.street;
    c.seed = get_u64(g, "generator", "seed", c.seed);
    c.height = get_int(g, "generator", "height", c.height);
    c.width = get_int(g, "generator", "width", c.width);
    c.t_len = get_int(g, "generator", "t_len", c.t_len);
    c.dt = get_num(g, "generator", "dt", c.dt);
    c.n_traj = get_int(g, "generator", "n_traj", c.n_traj);
    c.phi_lo = get_num(g, "generator", "phi_lo", c.phi_lo);
    c.phi_hi = get_num(g, "generator", "phi_hi", c.phi_hi);
    c.vortices_per_row =
        get_int(g, "generator", "vortices_per_row", c.vortices_per_row);
    c.core_width = get_num(g, "generator", "core_width", c.core_width);
    c.strength = get_num(g, "generator", "strength", c.strength);
    c.advect0 = get_num(g, "generator", "advect0", c.advect0);
    c.advect1 = get_num(g, "generator", "advect1", c.advect1);
    c.decay0 = get_num(g, "generator", "decay0", c.decay0);
    c.decay1 = get_num(g, "generator", "decay1", c.decay1);
    c.half_step_subsample =
        get_bool(g, "generator", "half_step_subsample", c.half_step_subsample);
  } else {
    throw ConfigError("generator.kind '" + rc.gen_kind +
                      "' is not one of linear-oracle, vortex-street");
  }
}

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json root;
  try {
    root = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path +
                      " does not parse: " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");
  reject_unknown(root, "config",
                 {"command", "seed", "out", "scheme", "tolerance", "dataset",
                  "generator", "model", "operator", "train", "loss", "eval",
                  "checkpoint"});
  rc.command = get_str(root, "config", "command", "");
  rc.seed = get_u64(root, "config", "seed", rc.seed);
  rc.out = get_str(root, "config", "out", rc.out);
  rc.scheme = get_str(root, "config", "scheme", rc.scheme);
  rc.tolerance = get_num(root, "config", "tolerance", rc.tolerance);
  rc.checkpoint = get_str(root, "config", "checkpoint", rc.checkpoint);

  if (const json* d = sub_object(root, "config", "dataset")) {
    reject_unknown(*d, "dataset", {"train", "test"});
    rc.ds_train = get_str(*d, "dataset", "train", "");
    rc.ds_test = get_str(*d, "dataset", "test", "");
  }
  if (const json* g = sub_object(root, "config", "generator"))
    load_generator_block(*g, rc);
  if (const json* m = sub_object(root, "config", "model")) {
    reject_unknown(*m, "model", {"hidden", "nz"});
    rc.hidden = get_int(*m, "model", "hidden", rc.hidden);
    rc.nz = get_int(*m, "model", "nz", rc.nz);
  }
  if (const json* o = sub_object(root, "config", "operator")) {
    reject_unknown(*o, "operator",
                   {"rank", "hyper_hidden", "embed_lo", "embed_hi",
                    "embed_count", "embed_sigma_scale", "noise_std"});
    rc.rank = get_int(*o, "operator", "rank", rc.rank);
    rc.hyper_hidden = get_int(*o, "operator", "hyper_hidden", rc.hyper_hidden);
    rc.embed_lo = get_num(*o, "operator", "embed_lo", rc.embed_lo);
    rc.embed_hi = get_num(*o, "operator", "embed_hi", rc.embed_hi);
    rc.embed_count = get_int(*o, "operator", "embed_count", rc.embed_count);
    rc.embed_sigma_scale =
        get_num(*o, "operator", "embed_sigma_scale", rc.embed_sigma_scale);
    rc.noise_std = get_num(*o, "operator", "noise_std", rc.noise_std);
  }
  if (const json* t = sub_object(root, "config", "train")) {
    reject_unknown(*t, "train",
                   {"epochs", "batch_size", "horizon", "stride", "lr_peak",
                    "lr_final", "warmup_epochs", "beta1", "beta2", "adam_eps",
                    "weight_decay", "grad_clip", "stability_weight",
                    "detach_targets", "stop_epoch", "threads"});
    TrainConfig& c = rc.train;
    c.epochs = get_int(*t, "train", "epochs", c.epochs);
    c.batch_size = get_int(*t, "train", "batch_size", c.batch_size);
    c.horizon = get_int(*t, "train", "horizon", c.horizon);
    c.stride = get_int(*t, "train", "stride", c.stride);
    c.lr_peak = get_num(*t, "train", "lr_peak", c.lr_peak);
    c.lr_final = get_num(*t, "train", "lr_final", c.lr_final);
    c.warmup_epochs = get_int(*t, "train", "warmup_epochs", c.warmup_epochs);
    c.beta1 = get_num(*t, "train", "beta1", c.beta1);
    c.beta2 = get_num(*t, "train", "beta2", c.beta2);
    c.adam_eps = get_num(*t, "train", "adam_eps", c.adam_eps);
    c.weight_decay = get_num(*t, "train", "weight_decay", c.weight_decay);
    c.grad_clip = get_num(*t, "train", "grad_clip", c.grad_clip);
    c.stability_weight =
        get_num(*t, "train", "stability_weight", c.stability_weight);
    c.detach_targets =
        get_bool(*t, "train", "detach_targets", c.detach_targets);
    c.stop_epoch = get_int(*t, "train", "stop_epoch", c.stop_epoch);
    c.threads = get_int(*t, "train", "threads", c.threads);
  }
  if (const json* l = sub_object(root, "config", "loss")) {
    reject_unknown(*l, "loss",
                   {"alpha", "beta", "lambda_phys", "w_cos", "w_sobolev_time",
                    "w_sobolev_space", "w_spectral", "temporal"});
    LossWeights& w = rc.train.weights;
    w.alpha = get_num(*l, "loss", "alpha", w.alpha);
    w.beta = get_num(*l, "loss", "beta", w.beta);
    w.lambda_phys = get_num(*l, "loss", "lambda_phys", w.lambda_phys);
    w.w_cos = get_num(*l, "loss", "w_cos", w.w_cos);
    w.w_sobolev_time =
        get_num(*l, "loss", "w_sobolev_time", w.w_sobolev_time);
    w.w_sobolev_space =
        get_num(*l, "loss", "w_sobolev_space", w.w_sobolev_space);
    w.w_spectral = get_num(*l, "loss", "w_spectral", w.w_spectral);
    w.temporal = parse_temporal_mode(
        get_str(*l, "loss", "temporal", temporal_mode_name(w.temporal)));
  }
  if (const json* e = sub_object(root, "config", "eval")) {
    reject_unknown(*e, "eval", {"horizon", "stride"});
    rc.eval_horizon = get_int(*e, "eval", "horizon", rc.eval_horizon);
    rc.eval_stride = get_int(*e, "eval", "stride", rc.eval_stride);
  }
  return rc;
}

// ---- resolved-config dump: every knob, defaults included ----

json resolved_json(const RunConfig& rc, const std::string& command) {
  json j;
  j["command"] = command;
  j["seed"] = rc.seed;
  j["out"] = rc.out;
  j["scheme"] = rc.scheme;
  j["tolerance"] = rc.tolerance;
  j["checkpoint"] = rc.checkpoint;
  j["dataset"] = {{"train", rc.ds_train}, {"test", rc.ds_test}};
  json g;
  g["kind"] = rc.gen_kind;
  if (rc.gen_kind == "linear-oracle") {
    const LinearOracleConfig& c = rc.oracle;
    g["seed"] = c.seed;
    g["nz_true"] = c.nz_true;
    g["n_d"] = c.n_d;
    g["t_len"] = c.t_len;
    g["dt"] = c.dt;
    g["n_traj"] = c.n_traj;
    g["phi_lo"] = c.phi_lo;
    g["phi_hi"] = c.phi_hi;
    g["half_step_subsample"] = c.half_step_subsample;
  } else if (rc.gen_kind == "vortex-street") {
    const VortexStreetConfig& c = rc.street;
    g["seed"] = c.seed;
    g["height"] = c.height;
    g["width"] = c.width;
    g["t_len"] = c.t_len;
    g["dt"] = c.dt;
    g["n_traj"] = c.n_traj;
    g["phi_lo"] = c.phi_lo;
    g["phi_hi"] = c.phi_hi;
    g["vortices_per_row"] = c.vortices_per_row;
    g["core_width"] = c.core_width;
    g["strength"] = c.strength;
    g["advect0"] = c.advect0;
    g["advect1"] = c.advect1;
    g["decay0"] = c.decay0;
    g["decay1"] = c.decay1;
    g["half_step_subsample"] = c.half_step_subsample;
  }
  j["generator"] = g;
  j["model"] = {{"hidden", rc.hidden}, {"nz", rc.nz}};
  j["operator"] = {{"rank", rc.rank},
                   {"hyper_hidden", rc.hyper_hidden},
                   {"embed_lo", rc.embed_lo},
                   {"embed_hi", rc.embed_hi},
                   {"embed_count", rc.embed_count},
                   {"embed_sigma_scale", rc.embed_sigma_scale},
                   {"noise_std", rc.noise_std}};
  const TrainConfig& t = rc.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"horizon", t.horizon},
                {"stride", t.stride},
                {"lr_peak", t.lr_peak},
                {"lr_final", t.lr_final},
                {"warmup_epochs", t.warmup_epochs},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},
                {"stability_weight", t.stability_weight},
                {"detach_targets", t.detach_targets},
                {"stop_epoch", t.stop_epoch},
                {"threads", t.threads}};
  const LossWeights& w = t.weights;
  j["loss"] = {{"alpha", w.alpha},
               {"beta", w.beta},
               {"lambda_phys", w.lambda_phys},
               {"w_cos", w.w_cos},
               {"w_sobolev_time", w.w_sobolev_time},
               {"w_sobolev_space", w.w_sobolev_space},
               {"w_spectral", w.w_spectral},
               {"temporal", temporal_mode_name(w.temporal)}};
  j["eval"] = {{"horizon", rc.eval_horizon}, {"stride", rc.eval_stride}};
  return j;
}

std::string emit_resolved(const RunConfig& rc, const std::string& command) {
  const std::string text = resolved_json(rc, command).dump(2) + "\n";
  std::fputs(text.c_str(), stdout);
  fs::create_directories(rc.out);
  const std::string path = (fs::path(rc.out) / "resolved_config.json").string();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  f.flush();
  if (!f) throw DataError("write to " + path + " failed");
  return text;
}

// ---- shared assembly ----

ModelConfig model_config_for(const RunConfig& rc, const TrajectoryDataset& ds) {
  ModelConfig m;
  m.channels = ds.channels;
  m.height = ds.height;
  m.width = ds.width;
  m.hidden = rc.hidden;
  m.nz = rc.nz;
  m.validate();
  return m;
}

KoopmanConfig operator_config_for(const RunConfig& rc) {
  KoopmanConfig k;
  k.nz = rc.nz;
  k.rank = rc.rank;
  k.hyper_hidden = rc.hyper_hidden;
  k.embed = ParamEmbedding::linspace(rc.embed_lo, rc.embed_hi, rc.embed_count,
                                     rc.embed_sigma_scale);
  k.embed.noise_std = rc.noise_std;
  k.validate();
  return k;
}

ParamStore fresh_params(const RunConfig& rc, const ModelConfig& m,
                        const KoopmanConfig& k) {
  ParamStore ps;
  Rng rng(derive_seed(rc.seed, kInitStream));
  init_model(ps, m, rng);
  init_operator(ps, k, rng);
  return ps;
}

void check_same_layout(const ParamStore& got, const ParamStore& want,
                       const std::string& source) {
  if (got.names() != want.names())
    throw DataError(source + " does not hold the configured model (parameter "
                             "sets differ)");
  for (const std::string& n : want.names())
    if (!got.at(n).same_shape(want.at(n)))
      throw DataError(source + ": parameter " + n + " has shape " +
                      got.at(n).shape_str() + ", configured model wants " +
                      want.at(n).shape_str());
}

std::string checkpoint_path(const RunConfig& rc) {
  return rc.checkpoint.empty()
             ? (fs::path(rc.out) / "checkpoint.kaew").string()
             : rc.checkpoint;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    diff += d * d;
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-300);
}

// ---- commands ----

int cmd_generate(RunConfig& rc) {
  if (rc.gen_kind.empty())
    throw ConfigError("generate: missing required key generator.kind");
  if (!rc.gen_seed_set) {
    rc.oracle.seed = rc.seed;
    rc.street.seed = rc.seed;
  }
  emit_resolved(rc, "generate");
  TrajectoryDataset ds = rc.gen_kind == "linear-oracle"
                             ? generate_linear_oracle(rc.oracle)
                             : generate_vortex_street(rc.street);
  const std::string path = (fs::path(rc.out) / "dataset.kaed").string();
  save_dataset(ds, path);
  std::printf("wrote %s: %d trajectories x %d frames of %d x %d x %d\n",
              path.c_str(), ds.n_traj(), ds.t_len, ds.channels, ds.height,
              ds.width);
  return 0;
}

int cmd_train(RunConfig& rc) {
  if (rc.ds_train.empty())
    throw ConfigError("train: missing required key dataset.train");
  rc.train.seed = rc.seed;
  rc.train.scheme = parse_scheme(rc.scheme);
  const std::string resolved = emit_resolved(rc, "train");
  const TrajectoryDataset ds = load_dataset(rc.ds_train);
  const ModelConfig mcfg = model_config_for(rc, ds);
  const KoopmanConfig kcfg = operator_config_for(rc);
  const std::string ckpt = checkpoint_path(rc);

  ParamStore ps = fresh_params(rc, mcfg, kcfg);
  TrainState state;
  if (fs::exists(ckpt)) {
    TrainCheckpoint tc = load_train_checkpoint(ckpt);
    check_same_layout(tc.params, ps, "checkpoint " + ckpt);
    ps = std::move(tc.params);
    state = std::move(tc.state);
    std::printf("resuming from %s at epoch %d\n", ckpt.c_str(),
                state.next_epoch);
  }

  MetricsRecord rec = train(ds, ps, mcfg, kcfg, rc.train, state);
  if (rec.epochs.empty()) {
    std::printf("training already complete (next epoch %d of %d); outputs "
                "left untouched\n",
                state.next_epoch, rc.train.epochs);
    return 0;
  }

  if (!rc.ds_test.empty()) {
    const TrajectoryDataset test = load_dataset(rc.ds_test);
    rec.evals.push_back(evaluate(test, ps, mcfg, kcfg, rc.eval_horizon,
                                 rc.train.scheme, rc.eval_stride));
  }

  save_train_checkpoint(ckpt, ps, state, resolved);
  const std::string metrics = (fs::path(rc.out) / "metrics.csv").string();
  write_metrics_csv(rec, metrics);

  const EpochMetrics& last = rec.epochs.back();
  std::printf("epoch %d: total %.6g (recon %.6g, pred %.6g)\n", last.epoch,
              last.mean.total, last.mean.recon, last.mean.pred);
  if (!rec.evals.empty()) {
    const EvalMetrics& ev = rec.evals.back();
    std::printf("held-out mean mse %.6g vs persistence %.6g\n", ev.mean_mse,
                ev.mean_persistence);
  }
  std::printf("wrote %s and %s\n", ckpt.c_str(), metrics.c_str());
  return 0;
}

int cmd_eval(RunConfig& rc) {
  if (rc.ds_test.empty())
    throw ConfigError("eval: missing required key dataset.test");
  emit_resolved(rc, "eval");
  const std::string ckpt = checkpoint_path(rc);
  TrainCheckpoint tc = load_train_checkpoint(ckpt);
  const TrajectoryDataset ds = load_dataset(rc.ds_test);
  const ModelConfig mcfg = model_config_for(rc, ds);
  const KoopmanConfig kcfg = operator_config_for(rc);
  check_same_layout(tc.params, fresh_params(rc, mcfg, kcfg),
                    "checkpoint " + ckpt);

  MetricsRecord rec;
  rec.evals.push_back(evaluate(ds, tc.params, mcfg, kcfg, rc.eval_horizon,
                               parse_scheme(rc.scheme), rc.eval_stride));
  const std::string path = (fs::path(rc.out) / "eval_metrics.csv").string();
  write_metrics_csv(rec, path);

  const EvalMetrics& ev = rec.evals[0];
  for (int j = 0; j < ev.horizon; ++j)
    std::printf("step %2d: mse %.6g  persistence %.6g\n", j + 1,
                ev.per_step_mse[j], ev.persistence_mse[j]);
  std::printf("mean mse %.6g vs persistence %.6g; rk4-vs-exp latent rel "
              "%.3e\n",
              ev.mean_mse, ev.mean_persistence, ev.max_latent_rel_exp_rk4);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_check_integrators(RunConfig& rc) {
  if (rc.ds_test.empty())
    throw ConfigError("check-integrators: missing required key dataset.test");
  emit_resolved(rc, "check-integrators");
  const std::string ckpt = checkpoint_path(rc);
  TrainCheckpoint tc = load_train_checkpoint(ckpt);
  const TrajectoryDataset ds = load_dataset(rc.ds_test);
  const ModelConfig mcfg = model_config_for(rc, ds);
  const KoopmanConfig kcfg = operator_config_for(rc);
  check_same_layout(tc.params, fresh_params(rc, mcfg, kcfg),
                    "checkpoint " + ckpt);
  const ParamStore& ps = tc.params;

  const std::vector<WindowBatch> windows = sliding_windows(ds, 2, 1);
  if (windows.empty())
    throw DataError("check-integrators: test dataset has no usable windows");
  const WindowBatch& w = windows.front();
  const std::int64_t nd = ds.frame_size();
  const std::vector<double> x_prev(w.context[0], w.context[0] + nd);
  const std::vector<double> x_t(w.context[1], w.context[1] + nd);
  const std::vector<double> z0 = encode_plain(ps, mcfg, x_t, x_prev);
  const linalg::Matrix k = koopman_matrix(ps, kcfg, w.phi);

  const std::string path = (fs::path(rc.out) / "integrators.csv").string();
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "kind,step,time,pair,latent_rel,decoded_rel\n";
  char buf[256];

  // (a) iterated rk4 against the one-shot exponential over 60 steps
  const int long_steps = 60;
  std::vector<double> times(long_steps);
  for (int j = 0; j < long_steps; ++j) times[j] = (j + 1) * ds.dt;
  const auto lat_rk4 = rollout_plain(k, z0, ds.dt, long_steps, Scheme::rk4);
  const auto lat_exp = rollout_exp(k, z0, times);
  double max_lat = 0.0, max_dec = 0.0;
  for (int j = 0; j < long_steps; ++j) {
    const double lrel = rel_l2(lat_rk4[j], lat_exp[j]);
    const double drel = rel_l2(decode_plain(ps, mcfg, lat_rk4[j]),
                               decode_plain(ps, mcfg, lat_exp[j]));
    max_lat = std::max(max_lat, lrel);
    max_dec = std::max(max_dec, drel);
    std::snprintf(buf, sizeof buf, "rk4-vs-exp,%d,%.17g,,%.17g,%.17g\n",
                  j + 1, times[j], lrel, drel);
    f << buf;
  }

  // (b) one model, three step sizes, aligned at shared physical times
  const Scheme scheme = parse_scheme(rc.scheme);
  const std::vector<double> dts = {0.05, 0.1, 0.2};
  const double t_end = 2.0;
  const int n_common = 10;  // t = 0.2, 0.4, ..., 2.0
  std::vector<std::vector<std::vector<double>>> decoded(dts.size());
  for (std::size_t i = 0; i < dts.size(); ++i) {
    const int steps = static_cast<int>(std::lround(t_end / dts[i]));
    std::vector<std::vector<double>> lat;
    if (scheme == Scheme::expm) {
      std::vector<double> ts(static_cast<std::size_t>(steps));
      for (int s = 0; s < steps; ++s) ts[s] = (s + 1) * dts[i];
      lat = rollout_exp(k, z0, ts);
    } else {
      lat = rollout_plain(k, z0, dts[i], steps, scheme);
    }
    const int every = steps / n_common;
    for (int c = 1; c <= n_common; ++c)
      decoded[i].push_back(decode_plain(ps, mcfg, lat[c * every - 1]));
  }
  double max_align = 0.0;
  for (int c = 1; c <= n_common; ++c) {
    const double t = c * (t_end / n_common);
    for (std::size_t a = 0; a < dts.size(); ++a)
      for (std::size_t b = a + 1; b < dts.size(); ++b) {
        const double drel = rel_l2(decoded[a][c - 1], decoded[b][c - 1]);
        max_align = std::max(max_align, drel);
        std::snprintf(buf, sizeof buf, "dt-align,,%.17g,%.3g/%.3g,,%.17g\n",
                      t, dts[a], dts[b], drel);
        f << buf;
      }
  }
  f.flush();
  if (!f) throw DataError("write to " + path + " failed");

  std::printf("rk4 vs exp over %d steps: max latent rel %.3e, max decoded "
              "rel %.3e\n",
              long_steps, max_lat, max_dec);
  std::printf("step-size alignment to t=%.1f (%s): max pairwise decoded rel "
              "%.3e\n",
              t_end, rc.scheme.c_str(), max_align);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_gradcheck(RunConfig& rc) {
  // Fixed tiny harness: 2x3 frames, latent size 3, horizon 2. Small enough
  // that central differences over every parameter stay fast and every loss
  // block, spatial ones included, participates.
  emit_resolved(rc, "gradcheck");
  LinearOracleConfig oc;
  oc.seed = rc.seed;
  oc.nz_true = 3;
  oc.n_d = 6;
  oc.t_len = 6;
  oc.n_traj = 2;
  TrajectoryDataset ds = generate_linear_oracle(oc);

  ModelConfig mcfg;
  mcfg.channels = ds.channels;
  mcfg.height = ds.height;
  mcfg.width = ds.width;
  mcfg.hidden = 5;
  mcfg.nz = 3;
  KoopmanConfig kcfg;
  kcfg.nz = 3;
  kcfg.rank = 2;
  kcfg.hyper_hidden = 4;
  kcfg.embed = ParamEmbedding::linspace(0.0, 1.0, 4);

  ParamStore ps;
  Rng rng(derive_seed(rc.seed, kInitStream));
  init_model(ps, mcfg, rng);
  init_operator(ps, kcfg, rng);
  // The conditioned correction starts near zero; lift it to O(1) so the
  // differences keep their digits (a wrong rule still fails loudly).
  for (double& v : ps.at("op/hyper/W1").values()) v *= 50.0;
  for (double& v : ps.at("op/hyper/b1").values()) v += 0.3;

  TrainConfig tcfg;
  tcfg.horizon = 2;
  tcfg.stability_weight = 0.1;
  tcfg.scheme = parse_scheme(rc.scheme);  // the integrator under test

  const std::vector<WindowBatch> windows = sliding_windows(ds, 2, 2);
  ad::Tape tape;
  WindowObjective obj =
      window_objective(tape, ps, mcfg, kcfg, tcfg, ds, windows.front());
  if (rc.corrupt) tape.inject_backward_fault(ad::Op::mul, 1.001);

  double worst = 0.0;
  std::string offender;
  for (const std::string& name : ps.names()) {
    const double rel = ad::finite_difference_check(tape, obj.total, name, 1e-5);
    std::printf("  %-14s rel %.3e\n", name.c_str(), rel);
    if (rel > worst) {
      worst = rel;
      offender = name;
    }
  }
  if (worst > rc.tolerance) {
    char msg[160];
    std::snprintf(msg, sizeof msg,
                  "gradcheck: parameter %s relative error %.3e exceeds "
                  "tolerance %.3e",
                  offender.c_str(), worst, rc.tolerance);
    throw NumericError(msg);
  }
  std::printf("gradcheck passed: worst %.3e (%s) within %.1e\n", worst,
              offender.c_str(), rc.tolerance);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent linear dynamics workbench: generate data, train the "
               "autoencoder-operator pair, evaluate rollouts, and probe the "
               "integrators"};
  app.require_subcommand(1);

  struct Flags {
    std::string config;
    std::uint64_t seed = 0;
    std::string out;
    std::string scheme;
    double tolerance = 0.0;
    bool corrupt = false;
  } fl;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", fl.config, "JSON run configuration");
    sub->add_option("--seed", fl.seed, "run seed (overrides the config)");
    sub->add_option("--out", fl.out, "output directory");
    sub->add_option("--scheme", fl.scheme,
                    "integrator: euler | rk4 | midpoint | exp");
    sub->add_option("--tolerance", fl.tolerance, "gradcheck tolerance");
    return sub;
  };

  CLI::App* c_gen = add_common(
      app.add_subcommand("generate", "synthesize a trajectory dataset"));
  CLI::App* c_train =
      add_common(app.add_subcommand("train", "fit the model to a dataset"));
  CLI::App* c_eval = add_common(
      app.add_subcommand("eval", "score a checkpoint on held-out data"));
  CLI::App* c_check = add_common(app.add_subcommand(
      "check-integrators",
      "compare iterated and exact flows, and step sizes against each other"));
  CLI::App* c_grad = add_common(app.add_subcommand(
      "gradcheck", "finite-difference audit of the full training objective"));
  c_grad->add_flag("--corrupt", fl.corrupt,
                   "inject a faulty backward rule (self-test of the audit)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunConfig rc = load_config(fl.config);
    if (!rc.command.empty() && rc.command != command)
      throw ConfigError("config file is for command '" + rc.command +
                        "' but '" + command + "' was invoked");
    if (c_gen->count("--seed") || c_train->count("--seed") ||
        c_eval->count("--seed") || c_check->count("--seed") ||
        c_grad->count("--seed"))
      rc.seed = fl.seed;
    if (!fl.out.empty()) rc.out = fl.out;
    if (!fl.scheme.empty()) rc.scheme = fl.scheme;
    if (c_grad->count("--tolerance") || c_train->count("--tolerance") ||
        c_eval->count("--tolerance") || c_check->count("--tolerance") ||
        c_gen->count("--tolerance"))
      rc.tolerance = fl.tolerance;
    rc.corrupt = fl.corrupt;
    parse_scheme(rc.scheme);  // reject bad names before any work

    if (command == "generate") return cmd_generate(rc);
    if (command == "train") return cmd_train(rc);
    if (command == "eval") return cmd_eval(rc);
    if (command == "check-integrators") return cmd_check_integrators(rc);
    return cmd_gradcheck(rc);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  }
}
