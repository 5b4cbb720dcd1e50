#include "kae/model.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "kae/common.hpp"
#include "kae/linalg.hpp"
#include "support.hpp"

using namespace kae;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 1;
  cfg.height = 2;
  cfg.width = 3;
  cfg.hidden = 5;
  cfg.nz = 4;
  return cfg;
}

std::vector<double> random_vec(Rng& rng, int n, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.normal(0.0, scale);
  return v;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/kae_test_") + stem + "_" + std::to_string(::getpid());
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("config validation and parameter bookkeeping") {
  ModelConfig bad = tiny_config();
  bad.nz = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.channels = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelConfig cfg = tiny_config();
  Rng rng(1);
  ParamStore ps;
  init_model(ps, cfg, rng);
  // closed form: each dense layer holds out*(in+1) scalars
  const std::int64_t enc = 5 * (6 + 1) + 4 * (5 + 1);
  const std::int64_t dec = 5 * (4 + 1) + 6 * (5 + 1);
  CHECK(model_param_count(cfg) == 2 * enc + dec);
  CHECK(ps.total_elements() == model_param_count(cfg));
  CHECK(ps.size() == 12);  // three stacks, two layers each, W and b
}

TEST_CASE("context encoding is the exact average of the two streams") {
  ModelConfig cfg = tiny_config();
  Rng rng(22);
  ParamStore ps;
  init_model(ps, cfg, rng);
  std::vector<double> xt = random_vec(rng, cfg.n_d());
  std::vector<double> xp = random_vec(rng, cfg.n_d());

  std::vector<double> m = encode_plain(ps, cfg, xt, xp);
  std::vector<double> u = encode_present_plain(ps, cfg, xt);
  std::vector<double> v =
      dense_plain(ps, "enc_h", cfg.encoder_widths(), xp);
  REQUIRE(m.size() == u.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    // 2*(0.5*(u+v)) - u recovers v up to one rounding of u+v
    const double recovered = 2.0 * m[i] - u[i];
    CHECK(std::fabs(recovered - v[i]) <= 1e-14 * (std::fabs(v[i]) + 1.0));
  }

  // graph path computes the same numbers
  ad::Tape tape;
  ad::Value mz = encode_graph(tape, ps, cfg,
                              tape.constant(Tensor({cfg.n_d(), 1}, xt)),
                              tape.constant(Tensor({cfg.n_d(), 1}, xp)));
  for (std::size_t i = 0; i < m.size(); ++i)
    CHECK(mz.val().values()[i] == doctest::Approx(m[i]).epsilon(1e-15));
}

TEST_CASE("zeroed final layers silence the model") {
  ModelConfig cfg = tiny_config();
  Rng rng(3);
  ParamStore ps;
  init_model(ps, cfg, rng);
  for (const char* t : {"enc_p/W1", "enc_p/b1", "enc_h/W1", "enc_h/b1"})
    for (double& v : ps.at(t).values()) v = 0.0;
  std::vector<double> z =
      encode_plain(ps, cfg, random_vec(rng, cfg.n_d()), random_vec(rng, cfg.n_d()));
  for (double v : z) CHECK(v == 0.0);

  for (const char* t : {"dec/W0", "dec/b0", "dec/W1", "dec/b1"})
    for (double& v : ps.at(t).values()) v = 0.0;
  std::vector<double> x = decode_plain(ps, cfg, random_vec(rng, cfg.nz));
  for (double v : x) CHECK(v == 0.0);
}

TEST_CASE("the two streams are distinct: swapping the context changes the latent") {
  ModelConfig cfg = tiny_config();
  Rng rng(77);
  ParamStore ps;
  init_model(ps, cfg, rng);
  std::vector<double> a = random_vec(rng, cfg.n_d());
  std::vector<double> b = random_vec(rng, cfg.n_d());
  std::vector<double> z1 = encode_plain(ps, cfg, a, b);
  std::vector<double> z2 = encode_plain(ps, cfg, b, a);
  double diff = 0.0;
  for (std::size_t i = 0; i < z1.size(); ++i)
    diff = std::max(diff, std::fabs(z1[i] - z2[i]));
  CHECK(diff > 1e-9);

  // determinism: a second call reproduces the first bit for bit
  std::vector<double> z1b = encode_plain(ps, cfg, a, b);
  for (std::size_t i = 0; i < z1.size(); ++i) CHECK(z1[i] == z1b[i]);
}

TEST_CASE("linear mode exposes the bare matrix composition") {
  ModelConfig cfg = tiny_config();
  Rng rng(5);
  ParamStore ps;
  init_model(ps, cfg, rng);
  for (const char* t : {"enc_p/b0", "enc_p/b1"})
    for (double& v : ps.at(t).values()) v = 0.0;
  std::vector<double> x = random_vec(rng, cfg.n_d());
  std::vector<double> got = encode_present_plain(ps, cfg, x, /*linear_mode=*/true);

  // W1 (W0 x) with explicit matrices
  const Tensor& w0 = ps.at("enc_p/W0");
  const Tensor& w1 = ps.at("enc_p/W1");
  linalg::Matrix m0(cfg.hidden, cfg.n_d(), w0.values());
  linalg::Matrix m1(cfg.nz, cfg.hidden, w1.values());
  std::vector<double> want = linalg::matvec(m1, linalg::matvec(m0, x));
  CHECK(testing::rel_l2(got, want) < 1e-13);
}

TEST_CASE("encoder gradients match finite differences") {
  ModelConfig cfg = tiny_config();
  Rng rng(31);
  ParamStore ps;
  init_model(ps, cfg, rng);
  std::vector<double> x = random_vec(rng, cfg.n_d());

  ad::Tape tape;
  ad::Value z = encode_present_graph(tape, ps, cfg,
                                     tape.constant(Tensor({cfg.n_d(), 1}, x)));
  ad::Value loss = ad::sum(ad::square(z));
  for (const char* name : {"enc_p/W0", "enc_p/b0", "enc_p/W1", "enc_p/b1"}) {
    CAPTURE(name);
    CHECK(ad::finite_difference_check(tape, loss, name, 1e-5) < 1e-5);
  }
}

TEST_CASE("outputs stay finite over the working input range") {
  ModelConfig cfg = tiny_config();
  Rng rng(8);
  ParamStore ps;
  init_model(ps, cfg, rng);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> xt(static_cast<std::size_t>(cfg.n_d()));
    std::vector<double> xp(static_cast<std::size_t>(cfg.n_d()));
    for (double& v : xt) v = rng.uniform(-10.0, 10.0);
    for (double& v : xp) v = rng.uniform(-10.0, 10.0);
    std::vector<double> z = encode_plain(ps, cfg, xt, xp);
    for (double v : z) CHECK(std::isfinite(v));
    std::vector<double> x = decode_plain(ps, cfg, z);
    for (double v : x) CHECK(std::isfinite(v));
  }
}

TEST_CASE("shape mismatches are rejected with the configured size") {
  ModelConfig cfg = tiny_config();
  Rng rng(2);
  ParamStore ps;
  init_model(ps, cfg, rng);
  CHECK_THROWS_AS(encode_plain(ps, cfg, {1.0, 2.0}, {3.0, 4.0}), DataError);
  CHECK_THROWS_AS(decode_plain(ps, cfg, {1.0}), DataError);
  ad::Tape tape;
  ad::Value shortv = tape.constant(Tensor({2, 1}, {1.0, 2.0}));
  CHECK_THROWS_AS(encode_present_graph(tape, ps, cfg, shortv), DataError);
  CHECK_THROWS_AS(decode_graph(tape, ps, cfg, shortv), DataError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  ModelConfig cfg = tiny_config();
  Rng rng(404);
  ParamStore ps;
  init_model(ps, cfg, rng);
  // optimizer slots ride along as plain named tensors
  Tensor m({3, 2}, {1.5, -2.25, 0.0, 1e-300, 3.0, -0.5});
  ps.add("opt.m/enc_p/W0", m);
  const std::string snapshot = "{\"epochs\": 7, \"seed\": 99}";

  const std::string p1 = temp_path("ckpt1");
  const std::string p2 = temp_path("ckpt2");
  save_checkpoint(p1, ps, snapshot);
  Checkpoint back = load_checkpoint(p1);

  CHECK(back.config_snapshot == snapshot);
  REQUIRE(back.params.size() == ps.size());
  REQUIRE(back.params.names() == ps.names());
  for (const std::string& name : ps.names()) {
    const Tensor& a = ps.at(name);
    const Tensor& b = back.params.at(name);
    CHECK(a.shape() == b.shape());
    CHECK(a.requires_grad == b.requires_grad);
    REQUIRE(a.values().size() == b.values().size());
    for (std::size_t i = 0; i < a.values().size(); ++i)
      CHECK(a.values()[i] == b.values()[i]);
  }

  // saving the loaded copy reproduces the file exactly
  save_checkpoint(p2, back.params, back.config_snapshot);
  CHECK(slurp(p1) == slurp(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint loader rejects damage outright") {
  ModelConfig cfg = tiny_config();
  Rng rng(11);
  ParamStore ps;
  init_model(ps, cfg, rng);
  const std::string path = temp_path("ckpt_bad");
  save_checkpoint(path, ps, "snapshot");
  const std::string good = slurp(path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  SUBCASE("newer version") {
    std::string bad = good;
    bad[4] = 9;  // little-endian low byte of the version word
    spit(path, bad);
    try {
      load_checkpoint(path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("truncation") {
    spit(path, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  SUBCASE("missing file") {
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  std::remove(path.c_str());
}
