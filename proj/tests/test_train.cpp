#include "kae/train.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "kae/common.hpp"
#include "kae/data.hpp"
#include "kae/koopman.hpp"
#include "kae/loss.hpp"
#include "kae/model.hpp"
#include "support.hpp"

using namespace kae;

namespace {

std::string temp_path(const char* stem) {
  return std::string("/tmp/kae_test_") + stem + "_" + std::to_string(::getpid());
}

TrajectoryDataset oracle_ds(int n_d, int nz_true, int t_len, int n_traj,
                            std::uint64_t seed) {
  LinearOracleConfig oc;
  oc.seed = seed;
  oc.nz_true = nz_true;
  oc.n_d = n_d;
  oc.t_len = t_len;
  oc.n_traj = n_traj;
  oc.dt = 0.1;
  return generate_linear_oracle(oc);
}

ModelConfig model_for(const TrajectoryDataset& ds, int hidden, int nz) {
  ModelConfig m;
  m.channels = ds.channels;
  m.height = ds.height;
  m.width = ds.width;
  m.hidden = hidden;
  m.nz = nz;
  return m;
}

KoopmanConfig op_for(int nz, int rank, int hyper_hidden) {
  KoopmanConfig k;
  k.nz = nz;
  k.rank = rank;
  k.hyper_hidden = hyper_hidden;
  k.embed = ParamEmbedding::linspace(0.0, 1.0, 4);
  return k;
}

ParamStore init_params(const ModelConfig& m, const KoopmanConfig& k,
                       std::uint64_t seed) {
  ParamStore ps;
  Rng rng(seed);
  init_model(ps, m, rng);
  init_operator(ps, k, rng);
  return ps;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.names() != b.names()) return false;
  for (const std::string& n : a.names())
    if (a.at(n).values() != b.at(n).values()) return false;
  return true;
}

// Rank correlation against the step index 1..n; ties get averaged ranks.
double spearman_vs_index(const std::vector<double>& v) {
  const int n = static_cast<int>(v.size());
  std::vector<int> idx(v.size());
  for (int i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * (i + j) + 1.0;
    for (int t = i; t <= j; ++t) rank[idx[t]] = r;
    i = j + 1;
  }
  const double mean = 0.5 * (n + 1);
  double num = 0.0, da = 0.0, db = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = (i + 1) - mean;
    const double y = rank[i] - mean;
    num += x * y;
    da += x * x;
    db += y * y;
  }
  return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("learning-rate schedule: warm-up, peak, cosine tail") {
  TrainConfig cfg;  // 200 epochs, warm-up 20, 5e-4 -> 1e-5
  CHECK(lr_schedule(cfg, 0) == 0.0);
  CHECK(lr_schedule(cfg, 10) == 2.5e-4);
  CHECK(lr_schedule(cfg, 20) == 5e-4);
  CHECK(lr_schedule(cfg, 199) == 1e-5);
  // rises through warm-up, falls after the peak
  for (int e = 1; e <= 20; ++e)
    CHECK(lr_schedule(cfg, e) > lr_schedule(cfg, e - 1));
  for (int e = 21; e < 200; ++e)
    CHECK(lr_schedule(cfg, e) < lr_schedule(cfg, e - 1));
  CHECK_THROWS_AS(lr_schedule(cfg, -1), ConfigError);
  CHECK_THROWS_AS(lr_schedule(cfg, 200), ConfigError);

  // no warm-up starts at the peak
  TrainConfig flat = cfg;
  flat.warmup_epochs = 0;
  CHECK(lr_schedule(flat, 0) == 5e-4);

  // a single post-warm-up epoch is the peak epoch itself
  TrainConfig tiny = cfg;
  tiny.epochs = 3;
  tiny.warmup_epochs = 2;
  CHECK(lr_schedule(tiny, 2) == 5e-4);
}

TEST_CASE("TrainConfig validation rejects inconsistent settings") {
  TrainConfig good;
  CHECK_NOTHROW(good.validate());

  auto expect_bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.epochs = 0; });
  expect_bad([](TrainConfig& c) { c.batch_size = 0; });
  expect_bad([](TrainConfig& c) { c.horizon = 0; });
  expect_bad([](TrainConfig& c) { c.stride = 0; });
  expect_bad([](TrainConfig& c) { c.warmup_epochs = c.epochs; });
  expect_bad([](TrainConfig& c) { c.warmup_epochs = -1; });
  expect_bad([](TrainConfig& c) { c.lr_peak = 0.0; });
  expect_bad([](TrainConfig& c) { c.lr_final = 0.0; });
  expect_bad([](TrainConfig& c) { c.lr_final = c.lr_peak * 2; });
  expect_bad([](TrainConfig& c) { c.beta1 = 1.0; });
  expect_bad([](TrainConfig& c) { c.beta2 = -0.1; });
  expect_bad([](TrainConfig& c) { c.adam_eps = 0.0; });
  expect_bad([](TrainConfig& c) { c.weight_decay = -1e-4; });
  expect_bad([](TrainConfig& c) { c.grad_clip = -1.0; });
  expect_bad([](TrainConfig& c) { c.stability_weight = -0.5; });
  expect_bad([](TrainConfig& c) { c.threads = -1; });
  expect_bad([](TrainConfig& c) { c.stop_epoch = c.epochs + 1; });
  expect_bad([](TrainConfig& c) { c.stop_epoch = -2; });
  expect_bad([](TrainConfig& c) { c.weights.alpha = -1.0; });
}

TEST_CASE("AdamW: decay predicate, closed-form steps, poisoned gradients") {
  CHECK(decayed_param("enc_p/W0"));
  CHECK(decayed_param("dec/W1"));
  CHECK(decayed_param("op/hyper/W0"));
  CHECK(decayed_param("op/S"));
  CHECK(decayed_param("op/A"));
  CHECK(decayed_param("op/B"));
  CHECK_FALSE(decayed_param("enc_p/b0"));
  CHECK_FALSE(decayed_param("op/hyper/b1"));
  CHECK_FALSE(decayed_param("op/d"));
  CHECK_FALSE(decayed_param("odd/Wx"));

  ParamStore ps;
  ps.add("lin/W0", Tensor({2, 2}, {1.0, -2.0, 3.0, 4.0}));
  ps.add("lin/b0", Tensor({2, 1}, {0.5, -0.25}));
  ps.add("op/d", Tensor({2, 1}, {-2.0, -1.5}));
  AdamWState st;
  init_optimizer(st, ps);

  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 0.1;

  SUBCASE("zero gradient leaves only the decay") {
    std::vector<Tensor> grads = {Tensor({2, 2}), Tensor({2, 1}),
                                 Tensor({2, 1})};
    optimizer_step(ps, grads, st, cfg, lr);
    // decayed weight matrix
    CHECK(ps.at("lin/W0")[0] == doctest::Approx(1.0 * (1 - lr * 0.01))
                                    .epsilon(1e-15));
    CHECK(ps.at("lin/W0")[3] == doctest::Approx(4.0 * (1 - lr * 0.01))
                                    .epsilon(1e-15));
    // bias and dissipation untouched, bit for bit
    CHECK(ps.at("lin/b0")[0] == 0.5);
    CHECK(ps.at("lin/b0")[1] == -0.25);
    CHECK(ps.at("op/d")[0] == -2.0);
    CHECK(ps.at("op/d")[1] == -1.5);
    CHECK(st.step == 1);
  }

  SUBCASE("first step with constant gradient is a signed unit step") {
    cfg.weight_decay = 0.0;
    const double g = 3.0;
    std::vector<Tensor> grads = {Tensor::full({2, 2}, g), Tensor({2, 1}),
                                 Tensor({2, 1})};
    optimizer_step(ps, grads, st, cfg, lr);
    const double expect = 1.0 - lr * g / (g + cfg.adam_eps);
    CHECK(ps.at("lin/W0")[0] == doctest::Approx(expect).epsilon(1e-15));
    // magnitude is the learning rate, up to the epsilon guard
    const double step1 = 1.0 - ps.at("lin/W0")[0];
    CHECK(std::abs(step1 / lr - 1.0) < 1e-8);
    // bias correction keeps the second identical step the same size
    optimizer_step(ps, grads, st, cfg, lr);
    const double step2 = (1.0 - step1) - ps.at("lin/W0")[0];
    CHECK(step2 == doctest::Approx(step1).epsilon(1e-12));
  }

  SUBCASE("a non-finite gradient aborts before any update") {
    std::vector<Tensor> grads = {Tensor({2, 2}), Tensor({2, 1}),
                                 Tensor({2, 1})};
    grads[1][0] = std::nan("");
    grads[0][0] = 5.0;  // would move lin/W0 if the scan were not first
    try {
      optimizer_step(ps, grads, st, cfg, lr);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("lin/b0") != std::string::npos);
    }
    CHECK(ps.at("lin/W0")[0] == 1.0);
    CHECK(st.step == 0);
  }

  SUBCASE("misaligned inputs are configuration errors") {
    std::vector<Tensor> two = {Tensor({2, 2}), Tensor({2, 1})};
    CHECK_THROWS_AS(optimizer_step(ps, two, st, cfg, lr), ConfigError);
    std::vector<Tensor> wrong_shape = {Tensor({2, 2}), Tensor({1, 2}),
                                       Tensor({2, 1})};
    CHECK_THROWS_AS(optimizer_step(ps, wrong_shape, st, cfg, lr), DataError);
    AdamWState empty;
    std::vector<Tensor> ok = {Tensor({2, 2}), Tensor({2, 1}), Tensor({2, 1})};
    CHECK_THROWS_AS(optimizer_step(ps, ok, empty, cfg, lr), ConfigError);
  }
}

TEST_CASE("thread width resolution honours the environment cap") {
  const char* prior = std::getenv("KAE_THREADS");
  const std::string saved = prior ? prior : "";

  CHECK_THROWS_AS(resolve_threads(-1), ConfigError);
  ::unsetenv("KAE_THREADS");
  CHECK(resolve_threads(0) == 1);
  CHECK(resolve_threads(2) == 2);
  ::setenv("KAE_THREADS", "4", 1);
  CHECK(resolve_threads(0) == 4);
  CHECK(resolve_threads(1) == 1);  // explicit width wins
  ::setenv("KAE_THREADS", "0", 1);
  CHECK_THROWS_AS(resolve_threads(0), ConfigError);
  ::setenv("KAE_THREADS", "many", 1);
  CHECK_THROWS_AS(resolve_threads(0), ConfigError);
  ::setenv("KAE_THREADS", "", 1);
  CHECK(resolve_threads(0) == 1);

  if (prior)
    ::setenv("KAE_THREADS", saved.c_str(), 1);
  else
    ::unsetenv("KAE_THREADS");
}

TEST_CASE("the full window objective differentiates end to end") {
  // n_d = 6 splits as 2x3, so every loss block, the spatial ones included,
  // is in play at a size where finite differences stay cheap.
  TrajectoryDataset ds = oracle_ds(6, 3, 6, 2, 21);
  ModelConfig mcfg = model_for(ds, 5, 3);
  KoopmanConfig kcfg = op_for(3, 2, 4);
  ParamStore ps = init_params(mcfg, kcfg, 5);

  // The conditioned correction starts near zero by design, which starves its
  // parameters of first-order influence and lets cancellation eat the central
  // differences. Nudge the hypernet output to O(1) so every path is checked
  // at full precision; a wrong rule would still show an O(1) error.
  for (double& v : ps.at("op/hyper/W1").values()) v *= 50.0;
  for (double& v : ps.at("op/hyper/b1").values()) v += 0.3;

  TrainConfig tcfg;
  tcfg.horizon = 2;
  tcfg.stability_weight = 0.1;

  const std::vector<WindowBatch> windows = sliding_windows(ds, 2, 2);
  REQUIRE(!windows.empty());

  ad::Tape tape;
  WindowObjective obj =
      window_objective(tape, ps, mcfg, kcfg, tcfg, ds, windows[0]);

  CHECK(obj.terms.recon.valid());
  CHECK(obj.terms.pred.valid());
  CHECK(obj.terms.consistency.valid());
  CHECK(obj.terms.linearity.valid());
  CHECK(obj.terms.cosine.valid());
  CHECK(obj.terms.energy.valid());
  CHECK(obj.terms.sobolev_time.valid());
  CHECK(obj.terms.sobolev_space.valid());
  CHECK(obj.terms.spectral.valid());
  CHECK(obj.stability.valid());
  CHECK(obj.total.scalar() ==
        doctest::Approx(recompute_total(obj.report, tcfg.weights) +
                        tcfg.stability_weight * obj.stability_value)
            .epsilon(1e-12));

  for (const std::string& name : ps.names()) {
    REQUIRE(tape.has_leaf(name));
    const double rel = ad::finite_difference_check(tape, obj.total, name, 1e-5);
    INFO("parameter ", name);
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("the objective skips blocks that carry no weight") {
  TrajectoryDataset ds = oracle_ds(6, 3, 6, 2, 21);
  ModelConfig mcfg = model_for(ds, 5, 3);
  KoopmanConfig kcfg = op_for(3, 2, 4);
  ParamStore ps = init_params(mcfg, kcfg, 5);
  const std::vector<WindowBatch> windows = sliding_windows(ds, 2, 2);

  TrainConfig full;
  full.horizon = 2;
  ad::Tape tape_full;
  window_objective(tape_full, ps, mcfg, kcfg, full, ds, windows[0]);

  TrainConfig lean = full;
  lean.weights.alpha = 0.0;
  lean.weights.beta = 0.0;
  lean.weights.lambda_phys = 0.0;
  ad::Tape tape_lean;
  WindowObjective obj =
      window_objective(tape_lean, ps, mcfg, kcfg, lean, ds, windows[0]);

  CHECK(obj.terms.recon.valid());
  CHECK_FALSE(obj.terms.pred.valid());
  CHECK_FALSE(obj.terms.consistency.valid());
  CHECK_FALSE(obj.terms.sobolev_time.valid());
  CHECK_FALSE(obj.terms.spectral.valid());
  CHECK_FALSE(obj.stability.valid());
  CHECK(obj.total.scalar() == obj.terms.recon.scalar());
  CHECK(obj.report.pred == 0.0);
  CHECK(tape_lean.size() < tape_full.size());

  // the detach switch changes what flows into the present-stream encoder
  TrainConfig attached = full;
  TrainConfig detached = full;
  detached.detach_targets = true;
  ad::Tape ta, td;
  WindowObjective oa =
      window_objective(ta, ps, mcfg, kcfg, attached, ds, windows[0]);
  WindowObjective od =
      window_objective(td, ps, mcfg, kcfg, detached, ds, windows[0]);
  ta.backward(oa.total);
  td.backward(od.total);
  CHECK(oa.total.scalar() == od.total.scalar());
  CHECK(ta.grad("enc_p/W0").values() != td.grad("enc_p/W0").values());
}

TEST_CASE("reconstruction-only training descends monotonically") {
  TrajectoryDataset ds = oracle_ds(16, 4, 32, 4, 9);
  ModelConfig mcfg = model_for(ds, 32, 8);
  KoopmanConfig kcfg = op_for(8, 2, 8);
  ParamStore ps = init_params(mcfg, kcfg, 13);

  TrainConfig tcfg;
  tcfg.epochs = 10;
  tcfg.warmup_epochs = 2;
  tcfg.batch_size = 16;
  tcfg.horizon = 8;
  tcfg.lr_peak = 1e-3;
  tcfg.lr_final = 1e-4;
  tcfg.seed = 3;
  tcfg.weights.alpha = 0.0;
  tcfg.weights.beta = 0.0;
  tcfg.weights.lambda_phys = 0.0;

  TrainState state;
  MetricsRecord rec = train(ds, ps, mcfg, kcfg, tcfg, state);
  REQUIRE(rec.epochs.size() == 10);

  const int expect_windows =
      ds.n_traj() * static_cast<int>(window_count(ds.t_len, 2, tcfg.horizon));
  for (const EpochMetrics& e : rec.epochs) {
    CHECK(e.windows == expect_windows);
    CHECK(e.lr == lr_schedule(tcfg, e.epoch));
    CHECK(e.mean.total == e.mean.recon);  // nothing else is on
  }
  for (std::size_t e = 1; e < rec.epochs.size(); ++e) {
    INFO("epoch ", e);
    CHECK(rec.epochs[e].mean.total < rec.epochs[e - 1].mean.total);
  }
  CHECK(state.next_epoch == 10);
}

TEST_CASE("runs are bitwise reproducible at any thread width") {
  TrajectoryDataset ds = oracle_ds(8, 3, 14, 2, 31);
  ModelConfig mcfg = model_for(ds, 8, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);
  kcfg.embed.noise_std = 0.05;  // conditioning jitter in play

  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.warmup_epochs = 1;
  tcfg.batch_size = 5;
  tcfg.horizon = 4;
  tcfg.seed = 17;
  tcfg.stability_weight = 0.05;

  auto run = [&](int threads) {
    ParamStore ps = init_params(mcfg, kcfg, 11);
    TrainConfig c = tcfg;
    c.threads = threads;
    TrainState st;
    MetricsRecord rec = train(ds, ps, mcfg, kcfg, c, st);
    return std::make_pair(std::move(ps), std::move(rec));
  };

  auto [ps1, rec1] = run(1);
  auto [ps3, rec3] = run(3);
  REQUIRE(rec1.epochs.size() == rec3.epochs.size());
  for (std::size_t e = 0; e < rec1.epochs.size(); ++e) {
    CHECK(rec1.epochs[e].mean.total == rec3.epochs[e].mean.total);
    CHECK(rec1.epochs[e].mean.spectral == rec3.epochs[e].mean.spectral);
    CHECK(rec1.epochs[e].stability == rec3.epochs[e].stability);
  }
  CHECK(same_params(ps1, ps3));

  // and the same width twice is equally identical
  auto [ps1b, rec1b] = run(1);
  CHECK(same_params(ps1, ps1b));
  for (std::size_t e = 0; e < rec1.epochs.size(); ++e)
    CHECK(rec1.epochs[e].mean.total == rec1b.epochs[e].mean.total);
}

TEST_CASE("a paused and resumed run retraces the uninterrupted one") {
  TrajectoryDataset ds = oracle_ds(8, 3, 14, 2, 31);
  ModelConfig mcfg = model_for(ds, 8, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);
  kcfg.embed.noise_std = 0.05;

  TrainConfig tcfg;
  tcfg.epochs = 4;
  tcfg.warmup_epochs = 1;
  tcfg.batch_size = 5;
  tcfg.horizon = 4;
  tcfg.seed = 23;

  // uninterrupted
  ParamStore ps_a = init_params(mcfg, kcfg, 29);
  TrainState st_a;
  MetricsRecord rec_a = train(ds, ps_a, mcfg, kcfg, tcfg, st_a);
  REQUIRE(rec_a.epochs.size() == 4);

  // paused after two epochs, checkpointed, reloaded, resumed
  ParamStore ps_b = init_params(mcfg, kcfg, 29);
  TrainState st_b;
  TrainConfig first_half = tcfg;
  first_half.stop_epoch = 2;
  MetricsRecord rec_b1 = train(ds, ps_b, mcfg, kcfg, first_half, st_b);
  REQUIRE(rec_b1.epochs.size() == 2);
  CHECK(st_b.next_epoch == 2);

  const std::string path = temp_path("resume");
  save_train_checkpoint(path, ps_b, st_b, "resume-test");
  TrainCheckpoint loaded = load_train_checkpoint(path);
  CHECK(loaded.config_snapshot == "resume-test");
  CHECK(loaded.state.next_epoch == 2);
  CHECK(loaded.state.opt.step == st_b.opt.step);
  CHECK(same_params(loaded.params, ps_b));

  MetricsRecord rec_b2 =
      train(ds, loaded.params, mcfg, kcfg, tcfg, loaded.state);
  REQUIRE(rec_b2.epochs.size() == 2);
  CHECK(rec_b2.epochs[0].epoch == 2);
  CHECK(rec_b2.epochs[0].mean.total == rec_a.epochs[2].mean.total);
  CHECK(rec_b2.epochs[1].mean.total == rec_a.epochs[3].mean.total);
  CHECK(same_params(loaded.params, ps_a));
  std::remove(path.c_str());
}

TEST_CASE("evaluation scores rollouts against the persistence baseline") {
  TrajectoryDataset ds = oracle_ds(8, 3, 64, 2, 41);
  ModelConfig mcfg = model_for(ds, 6, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);
  ParamStore ps = init_params(mcfg, kcfg, 37);

  const int horizon = 4;
  EvalMetrics ev = evaluate(ds, ps, mcfg, kcfg, horizon, Scheme::rk4);
  CHECK(ev.per_step_mse.size() == 4);
  CHECK(ev.persistence_mse.size() == 4);

  // replicate the baseline sum in the same accumulation order
  const std::vector<WindowBatch> windows = sliding_windows(ds, 2, horizon);
  std::vector<double> persist(horizon, 0.0);
  const std::int64_t nd = ds.frame_size();
  for (const WindowBatch& w : windows) {
    const std::vector<double> x_t(w.context[1], w.context[1] + nd);
    for (int j = 0; j < horizon; ++j) {
      const std::vector<double> tgt(w.targets[j], w.targets[j] + nd);
      persist[j] += frame_mse(x_t, tgt, ds.channels);
    }
  }
  for (int j = 0; j < horizon; ++j) {
    persist[j] *= 1.0 / static_cast<double>(windows.size());
    CHECK(ev.persistence_mse[j] == persist[j]);
  }

  double mean = 0.0;
  for (double m : ev.per_step_mse) mean += m;
  mean /= horizon;
  CHECK(ev.mean_mse == doctest::Approx(mean).epsilon(1e-12));
  CHECK(ev.mse_rk4 == doctest::Approx(mean).epsilon(1e-12));

  // at this step size the exponential and rk4 paths all but coincide,
  // even for untrained weights
  CHECK(ev.max_latent_rel_exp_rk4 >= 0.0);
  CHECK(ev.max_latent_rel_exp_rk4 < 1e-4);
  CHECK(ev.time_iterative_s >= 0.0);
  CHECK(ev.time_exp_s >= 0.0);

  EvalMetrics ee = evaluate(ds, ps, mcfg, kcfg, horizon, Scheme::expm);
  CHECK(ee.mse_rk4 == ev.mse_rk4);  // same comparison fields either way
  CHECK(ee.mse_exp == ev.mse_exp);
  double mean_e = 0.0;
  for (double m : ee.per_step_mse) mean_e += m;
  mean_e /= horizon;
  CHECK(ee.mse_exp == doctest::Approx(mean_e).epsilon(1e-12));

  // long horizons fit as long as the trajectories do
  EvalMetrics elong = evaluate(ds, ps, mcfg, kcfg, 60, Scheme::rk4);
  CHECK(elong.per_step_mse.size() == 60);

  CHECK_THROWS_AS(evaluate(ds, ps, mcfg, kcfg, 0, Scheme::rk4), ConfigError);
  CHECK_THROWS_AS(evaluate(ds, ps, mcfg, kcfg, 63, Scheme::rk4), ConfigError);
  ModelConfig wrong = mcfg;
  wrong.width = 3;
  CHECK_THROWS_AS(evaluate(ds, ps, wrong, kcfg, 4, Scheme::rk4), ConfigError);
}

TEST_CASE("after a short fit the error still grows with the step") {
  TrajectoryDataset ds = oracle_ds(16, 4, 32, 4, 9);
  ModelConfig mcfg = model_for(ds, 32, 8);
  KoopmanConfig kcfg = op_for(8, 2, 8);
  ParamStore ps = init_params(mcfg, kcfg, 13);

  TrainConfig tcfg;
  tcfg.epochs = 15;
  tcfg.warmup_epochs = 2;
  tcfg.batch_size = 16;
  tcfg.horizon = 6;
  tcfg.lr_peak = 2e-3;
  tcfg.lr_final = 1e-4;
  tcfg.seed = 5;

  TrainState state;
  MetricsRecord rec = train(ds, ps, mcfg, kcfg, tcfg, state);
  CHECK(rec.epochs.back().mean.total < rec.epochs.front().mean.total);

  EvalMetrics ev = evaluate(ds, ps, mcfg, kcfg, 6, Scheme::rk4);
  CHECK(spearman_vs_index(ev.per_step_mse) > 0.0);
}

TEST_CASE("metrics tables land in one wide CSV") {
  MetricsRecord rec;
  EpochMetrics e;
  e.epoch = 0;
  e.lr = 2.5e-4;
  e.windows = 12;
  e.mean.recon = 0.5;
  e.mean.total = 0.75;
  rec.epochs.push_back(e);
  EvalMetrics ev;
  ev.horizon = 2;
  ev.scheme = Scheme::rk4;
  ev.per_step_mse = {0.1, 0.2};
  ev.persistence_mse = {0.3, 0.4};
  ev.mean_mse = 0.15;
  ev.mean_persistence = 0.35;
  ev.mse_rk4 = 0.15;
  ev.mse_exp = 0.15000001;
  ev.max_latent_rel_exp_rk4 = 1e-7;
  rec.evals.push_back(ev);

  const std::string path = temp_path("metrics");
  write_metrics_csv(rec, path);

  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    // trailing empty cells are dropped by getline; pad to the header width
    const std::size_t want = rows.empty() ? cells.size() : rows[0].size();
    while (cells.size() < want) cells.push_back("");
    rows.push_back(cells);
  }
  REQUIRE(rows.size() == 5);  // header, epoch, 2 eval steps, summary
  const std::size_t width = rows[0].size();
  CHECK(width == 29);
  for (std::size_t r = 1; r < rows.size(); ++r) CHECK(rows[r].size() == width);
  CHECK(rows[0][0] == "kind");
  CHECK(rows[1][0] == "epoch");
  CHECK(rows[2][0] == "eval-step");
  CHECK(rows[4][0] == "eval-summary");
  CHECK(std::strtod(rows[1][5].c_str(), nullptr) == 2.5e-4);   // lr survives
  CHECK(std::strtod(rows[2][20].c_str(), nullptr) == 0.1);     // per-step mse
  CHECK(std::strtod(rows[4][25].c_str(), nullptr) == 0.15000001);
  std::remove(path.c_str());
}

TEST_CASE("a poisoned parameter aborts training with provenance") {
  TrajectoryDataset ds = oracle_ds(8, 3, 14, 2, 31);
  ModelConfig mcfg = model_for(ds, 8, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);
  ParamStore ps = init_params(mcfg, kcfg, 11);
  ps.at("enc_p/W0")[0] = std::nan("");

  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.warmup_epochs = 0;
  tcfg.batch_size = 5;
  tcfg.horizon = 4;

  TrainState state;
  try {
    train(ds, ps, mcfg, kcfg, tcfg, state);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    const std::string msg = err.what();
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("trajectory") != std::string::npos);
  }
}

TEST_CASE("checkpoints without training state load as a fresh run") {
  TrajectoryDataset ds = oracle_ds(8, 3, 14, 2, 31);
  ModelConfig mcfg = model_for(ds, 8, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);
  ParamStore ps = init_params(mcfg, kcfg, 11);

  const std::string plain = temp_path("plain_ckpt");
  save_checkpoint(plain, ps, "weights-only");
  TrainCheckpoint fresh = load_train_checkpoint(plain);
  CHECK(fresh.state.next_epoch == 0);
  CHECK(fresh.state.opt.step == 0);
  REQUIRE(fresh.state.opt.m.size() == ps.size());
  CHECK(same_params(fresh.params, ps));
  for (const Tensor& m : fresh.state.opt.m)
    for (double v : m.values()) CHECK(v == 0.0);
  std::remove(plain.c_str());

  // a partial state is rejected, not silently repaired
  ParamStore partial;
  for (const std::string& n : ps.names()) partial.add(n, ps.at(n));
  partial.add("train/next_epoch", Tensor::scalar(1.0));
  const std::string bad = temp_path("partial_ckpt");
  save_checkpoint(bad, partial, "partial");
  CHECK_THROWS_AS(load_train_checkpoint(bad), DataError);
  std::remove(bad.c_str());
}

TEST_CASE("stride thins the window schedule as promised") {
  TrajectoryDataset ds = oracle_ds(8, 3, 20, 3, 43);
  ModelConfig mcfg = model_for(ds, 8, 4);
  KoopmanConfig kcfg = op_for(4, 2, 4);

  for (int stride : {1, 3}) {
    ParamStore ps = init_params(mcfg, kcfg, 11);
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.warmup_epochs = 0;
    tcfg.batch_size = 8;
    tcfg.horizon = 4;
    tcfg.stride = stride;
    tcfg.weights.alpha = 0.0;
    tcfg.weights.beta = 0.0;
    tcfg.weights.lambda_phys = 0.0;
    TrainState state;
    MetricsRecord rec = train(ds, ps, mcfg, kcfg, tcfg, state);
    REQUIRE(rec.epochs.size() == 1);
    CHECK(rec.epochs[0].windows ==
          ds.n_traj() *
              static_cast<int>(window_count(ds.t_len, 2, 4, stride)));
  }
}
