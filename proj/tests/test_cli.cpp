#include <unistd.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "doctest.h"
#include "kbub/byte_io.hpp"
#include "kbub/cli.hpp"
#include "kbub/dataset.hpp"
#include "kbub/export.hpp"
#include "kbub/koopman.hpp"
#include "kbub/random.hpp"

using namespace kbub;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("kbub_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = scratch() / (name + ".json");
  write_text_file(p, j.dump());
  return p;
}

int kbub_run(std::vector<std::string> args) {
  args.insert(args.begin(), "kbub");
  return cli::run(args);
}

std::vector<std::uint8_t> bytes(const fs::path& p) { return read_file(p); }

json load_json(const fs::path& p) {
  const auto b = read_file(p);
  return json::parse(b.begin(), b.end());
}

// Small shared dataset: 3 trajectories of 4 intervals on 16 x 16.
const fs::path& small_dataset() {
  static const fs::path dir = [] {
    const fs::path out = scratch() / "gen_small";
    const auto cfg = write_config("gen_small", {{"n_trajectories", 3}, {"nx", 16}, {"nz", 16}, {"n_steps", 4}});
    REQUIRE(kbub_run({"generate", "--config", cfg.string(), "--out", out.string(), "--seed", "5"}) == 0);
    return out;
  }();
  return dir;
}

json small_train_config(int epochs) {
  return {{"dataset", (small_dataset() / "dataset.kbub").string()},
          {"max_epochs", epochs},
          {"batch_size", 4},
          {"lr", 1e-3},
          {"model", {{"channels", {4, 8}}, {"koopman_dim", 16}}}};
}

const fs::path& small_checkpoint() {
  static const fs::path dir = [] {
    const fs::path out = scratch() / "train_small";
    const auto cfg = write_config("train_small", small_train_config(2));
    REQUIRE(kbub_run({"train", "--config", cfg.string(), "--out", out.string()}) == 0);
    return out;
  }();
  return dir;
}

std::unique_ptr<KoopmanAE> load_model(const fs::path& dir, NormStats* stats) {
  const json j = load_json(dir / "model.json");
  AEConfig c;
  c.height = j["model"]["height"].get<std::size_t>();
  c.width = j["model"]["width"].get<std::size_t>();
  c.channels = j["model"]["channels"].get<std::vector<std::size_t>>();
  c.koopman_dim = j["model"]["koopman_dim"].get<std::size_t>();
  c.head_channels = j["model"]["head_channels"].get<std::size_t>();
  c.m = j["model"]["m"].get<int>();
  auto m = std::make_unique<KoopmanAE>(c, 0);
  ad::assign_parameters(m->parameters(), ad::load_parameters(dir / "model.kprm"));
  for (int v = 0; v < kNumVariables; ++v) {
    const json& e = j["stats"][variable_name(static_cast<Variable>(v))];
    stats->mean[v] = e["mean"].get<double>();
    stats->std[v] = e["std"].get<double>();
  }
  return m;
}

void write_linear_dataset(const fs::path& path, const Eigen::MatrixXd& states, int nx, int nz) {
  TrajectoryRecord rec;
  for (Eigen::Index k = 0; k < states.cols(); ++k) {
    State2D s;
    s.rho.assign(static_cast<std::size_t>(nx * nz), 1.0);
    s.rho_u1.assign(s.rho.size(), 0.0);
    s.rho_u3.assign(s.rho.size(), 0.0);
    s.rho_theta.assign(states.col(k).data(), states.col(k).data() + states.rows());
    rec.states.push_back(s);
  }
  write_dataset(path, std::vector<TrajectoryRecord>{rec}, NormStats{}, nx, nz, PayloadType::f64);
}

}  // namespace

TEST_CASE("generate is deterministic and echoes a reproducible config") {
  const auto cfg = write_config("gen_det", {{"n_trajectories", 2}, {"nx", 16}, {"nz", 16}, {"n_steps", 2}});
  const fs::path a = scratch() / "gen_a", b = scratch() / "gen_b", c = scratch() / "gen_c";
  REQUIRE(kbub_run({"generate", "--config", cfg.string(), "--out", a.string(), "--seed", "9"}) == 0);
  REQUIRE(kbub_run({"generate", "--config", cfg.string(), "--out", b.string(), "--seed", "9"}) == 0);
  for (const char* f : {"dataset.kbub", "dataset.json", "config.json"}) {
    CAPTURE(f);
    CHECK(bytes(a / f) == bytes(b / f));
  }
  REQUIRE(kbub_run({"generate", "--config", (a / "config.json").string(), "--out", c.string()}) == 0);
  CHECK(bytes(a / "dataset.kbub") == bytes(c / "dataset.kbub"));
  CHECK(bytes(a / "config.json") == bytes(c / "config.json"));

  const Dataset ds = read_dataset(a / "dataset.kbub");
  CHECK(ds.records.size() == 2);
  const json meta = load_json(a / "dataset.json");
  CHECK(meta["truncation"]["written"] == 2);
  CHECK(meta["split"]["train"].size() + meta["split"]["val"].size() == 2);
  CHECK(meta["records"][0]["times_s"].size() == 3);
  CHECK(fs::exists(a / "timing.json"));
}

TEST_CASE("exit codes") {
  const fs::path out = scratch() / "errs";
  SUBCASE("unknown key") {
    const auto cfg = write_config("bad_key", {{"n_trajectorys", 2}});
    CHECK(kbub_run({"generate", "--config", cfg.string(), "--out", out.string()}) == cli::kConfigError);
  }
  SUBCASE("malformed JSON") {
    const fs::path p = scratch() / "broken.json";
    write_text_file(p, "{\"nx\": ");
    CHECK(kbub_run({"generate", "--config", p.string(), "--out", out.string()}) == cli::kConfigError);
  }
  SUBCASE("wrong value type") {
    const auto cfg = write_config("bad_type", {{"nx", "wide"}});
    CHECK(kbub_run({"generate", "--config", cfg.string(), "--out", out.string()}) == cli::kConfigError);
  }
  SUBCASE("bad preset and unknown subcommand") {
    CHECK(kbub_run({"generate", "--preset", "huge", "--out", out.string()}) == cli::kConfigError);
    CHECK(kbub_run({"simulate"}) == cli::kConfigError);
    CHECK(kbub_run({}) == cli::kConfigError);
  }
  SUBCASE("missing dataset") {
    const auto cfg = write_config("no_data", {{"dataset", (scratch() / "nope.kbub").string()}});
    CHECK(kbub_run({"train", "--config", cfg.string(), "--out", out.string()}) == cli::kDataError);
  }
  SUBCASE("corrupt dataset") {
    const fs::path p = scratch() / "corrupt.kbub";
    auto b = bytes(small_dataset() / "dataset.kbub");
    b[b.size() / 2] ^= 0xFF;
    write_file(p, b);
    const auto cfg = write_config("corrupt", {{"dataset", p.string()}});
    CHECK(kbub_run({"dmd", "--config", cfg.string(), "--out", out.string()}) == cli::kDataError);
  }
  SUBCASE("checkpoint and data disagree on the grid") {
    const auto gcfg = write_config("gen_8", {{"n_trajectories", 1}, {"nx", 8}, {"nz", 8}, {"n_steps", 1}});
    const fs::path g8 = scratch() / "gen_8";
    REQUIRE(kbub_run({"generate", "--config", gcfg.string(), "--out", g8.string()}) == 0);
    const auto cfg = write_config("mismatch", {{"dataset", (g8 / "dataset.kbub").string()},
                                               {"checkpoint", small_checkpoint().string()},
                                               {"split", "all"}});
    CHECK(kbub_run({"evaluate", "--config", cfg.string(), "--out", out.string()}) == cli::kDataError);
  }
  SUBCASE("degenerate DMD input") {
    const fs::path p = scratch() / "zeros.kbub";
    write_linear_dataset(p, Eigen::MatrixXd::Zero(4, 3), 2, 2);
    const auto cfg = write_config("zeros", {{"dataset", p.string()}});
    CHECK(kbub_run({"dmd", "--config", cfg.string(), "--out", out.string()}) == cli::kDataError);
  }
  SUBCASE("help") { CHECK(kbub_run({"--help"}) == 0); }
}

TEST_CASE("train") {
  SUBCASE("patience 0 gives one epoch and one checkpoint") {
    json j = small_train_config(5);
    j["patience"] = 0;
    const fs::path out = scratch() / "train_p0";
    REQUIRE(kbub_run({"train", "--config", write_config("p0", j).string(), "--out", out.string()}) == 0);
    const json rep = load_json(out / "report.json");
    CHECK(rep["epochs"].size() == 1);
    CHECK(rep["stop_reason"] == "patience");
    CHECK(fs::exists(out / "model.kprm"));
    CHECK(fs::exists(out / "optimizer.kprm"));
  }
  SUBCASE("deterministic outputs") {
    const auto cfg = write_config("det", small_train_config(2));
    const fs::path a = scratch() / "train_a", b = scratch() / "train_b";
    REQUIRE(kbub_run({"train", "--config", cfg.string(), "--out", a.string(), "--seed", "3"}) == 0);
    REQUIRE(kbub_run({"train", "--config", cfg.string(), "--out", b.string(), "--seed", "3"}) == 0);
    for (const char* f : {"model.kprm", "optimizer.kprm", "model.json", "report.json", "config.json"}) {
      CAPTURE(f);
      CHECK(bytes(a / f) == bytes(b / f));
    }
  }
  SUBCASE("best-so-far is monotone") {
    const json rep = load_json(small_checkpoint() / "report.json");
    double prev = 1e300;
    for (const auto& v : rep["best_so_far"]) {
      CHECK(v.get<double>() <= prev);
      prev = v.get<double>();
    }
    CHECK(rep["best_val"].get<double>() == prev);
  }
  SUBCASE("resuming continues the step counter") {
    json j = small_train_config(1);
    j["resume"] = small_checkpoint().string();
    const fs::path out = scratch() / "train_resume";
    REQUIRE(kbub_run({"train", "--config", write_config("resume", j).string(), "--out", out.string()}) == 0);
    const json first = load_json(small_checkpoint() / "report.json");
    const json rep = load_json(out / "report.json");
    CHECK(rep["resumed_from_step"] == first["optimizer_steps"]);
    CHECK(rep["optimizer_steps"].get<int>() > first["optimizer_steps"].get<int>());
  }
}

TEST_CASE("evaluate") {
  const auto cfg = write_config("eval", {{"dataset", (small_dataset() / "dataset.kbub").string()},
                                         {"checkpoint", small_checkpoint().string()},
                                         {"split", "all"}});
  const fs::path a = scratch() / "eval_a", b = scratch() / "eval_b";
  REQUIRE(kbub_run({"evaluate", "--config", cfg.string(), "--out", a.string()}) == 0);
  REQUIRE(kbub_run({"evaluate", "--config", cfg.string(), "--out", b.string()}) == 0);
  CHECK(bytes(a / "metrics.json") == bytes(b / "metrics.json"));

  const json m = load_json(a / "metrics.json");
  REQUIRE(m["per_sample"].size() == 12);
  CHECK(m["n_pairs"] == 12);
  for (const char* key : {"recon_mse", "pred_mse", "recon_l2", "pred_l2"}) {
    double s = 0.0;
    for (const auto& p : m["per_sample"]) s += p[key].get<double>();
    const double mean = s / 12.0;
    const double agg = m["aggregate"][key].get<double>();
    CAPTURE(key);
    CHECK(std::abs(agg - mean) <= 1e-12 * std::abs(mean));
  }
  for (const auto& p : m["per_sample"]) {
    // 2-norm and MSE describe the same error field of 16 x 16 values
    CHECK(p["recon_l2"].get<double>() ==
          doctest::Approx(std::sqrt(p["recon_mse"].get<double>() * 256.0)).epsilon(1e-12));
  }
}

TEST_CASE("rollout") {
  const fs::path data = small_dataset() / "dataset.kbub";
  NormStats stats;
  SUBCASE("steps = 0 is the reconstruction of the initial state") {
    const fs::path out = scratch() / "roll0";
    const auto cfg = write_config("roll0", {{"dataset", data.string()},
                                            {"checkpoint", small_checkpoint().string()},
                                            {"trajectory", 1},
                                            {"steps", 0}});
    REQUIRE(kbub_run({"rollout", "--config", cfg.string(), "--out", out.string()}) == 0);
    const NpyArray a = read_npy(out / "predictions.npy");
    CHECK(a.shape == std::vector<std::size_t>{1, 16, 16});
    const auto model = load_model(small_checkpoint(), &stats);
    const Dataset ds = read_dataset(data);
    const TransformedState tf = transform_variables(ds.records[1].states[0]);
    const ad::Tensor x0 = ad::Tensor::from({1, 16, 16}, stats.normalize(tf.theta, Variable::theta));
    ad::Tape t;
    const ad::Tensor rec = reconstruct(t, *model, x0);
    CHECK(a.data == stats.denormalize(rec.data(), Variable::theta));
    const json div = load_json(out / "divergence.json");
    CHECK(div["steps_completed"] == 0);
    CHECK(div["mse"].size() == 1);
  }
  SUBCASE("identity K gives repeated reconstruction") {
    const fs::path ck = scratch() / "identity_ck";
    fs::create_directories(ck);
    fs::copy_file(small_checkpoint() / "model.json", ck / "model.json", fs::copy_options::overwrite_existing);
    auto params = ad::load_parameters(small_checkpoint() / "model.kprm");
    for (auto& p : params) {
      if (p.name != "koopman.weight") continue;
      const std::size_t d = p.tensor.dim(0);
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) p.tensor.data()[i * d + j] = i == j ? 1.0 : 0.0;
      }
    }
    ad::save_parameters(ck / "model.kprm", params);

    const fs::path out = scratch() / "roll_id";
    const auto cfg = write_config("roll_id", {{"dataset", data.string()},
                                              {"checkpoint", ck.string()},
                                              {"trajectory", 0},
                                              {"steps", 3}});
    REQUIRE(kbub_run({"rollout", "--config", cfg.string(), "--out", out.string()}) == 0);
    const NpyArray a = read_npy(out / "predictions.npy");
    REQUIRE(a.shape == std::vector<std::size_t>{4, 16, 16});

    const auto model = load_model(ck, &stats);
    const Dataset ds = read_dataset(data);
    const TransformedState tf = transform_variables(ds.records[0].states[0]);
    ad::Tensor x = ad::Tensor::from({1, 16, 16}, stats.normalize(tf.theta, Variable::theta));
    ad::Tape t;
    // element 0 reconstructs x0; element n applies the reconstruction n times
    for (std::size_t n = 0; n < 4; ++n) {
      if (n != 1) x = reconstruct(t, *model, x);
      const Field f = stats.denormalize(x.data(), Variable::theta);
      CHECK(std::equal(f.begin(), f.end(), a.data.begin() + static_cast<std::ptrdiff_t>(n * 256)));
    }
  }
  SUBCASE("latent flag") {
    const fs::path out = scratch() / "roll_latent";
    const auto cfg = write_config("roll_latent", {{"dataset", data.string()},
                                                  {"checkpoint", small_checkpoint().string()},
                                                  {"steps", 2}});
    REQUIRE(kbub_run({"rollout", "--config", cfg.string(), "--out", out.string(), "--latent-rollout"}) == 0);
    CHECK(load_json(out / "divergence.json")["mode"] == "latent");
    CHECK(load_json(out / "config.json")["latent"] == true);
  }
}

TEST_CASE("dmd subcommand") {
  SUBCASE("constant trajectory") {
    const fs::path p = scratch() / "const.kbub";
    Eigen::VectorXd x(6);
    x << 300.0, 301.0, 302.5, 299.0, 303.0, 300.5;
    write_linear_dataset(p, x.replicate(1, 5), 3, 2);
    const fs::path out = scratch() / "dmd_const";
    REQUIRE(kbub_run({"dmd", "--config", write_config("dmd_const", {{"dataset", p.string()}}).string(), "--out",
                      out.string()}) == 0);
    const json s = load_json(out / "spectrum.json");
    REQUIRE(s["rank"] == 1);
    CHECK(std::abs(s["eigenvalues"][0][0].get<double>() - 1.0) <= 1e-12);
    CHECK(std::abs(s["eigenvalues"][0][1].get<double>()) <= 1e-12);
  }
  SUBCASE("rank flag") {
    const fs::path out = scratch() / "dmd_rank";
    const auto cfg = write_config("dmd_rank", {{"dataset", (small_dataset() / "dataset.kbub").string()},
                                               {"rank", 3},
                                               {"trajectories", {0, 1}}});
    REQUIRE(kbub_run({"dmd", "--config", cfg.string(), "--out", out.string()}) == 0);
    const json s = load_json(out / "spectrum.json");
    CHECK(s["eigenvalues"].size() == 3);
    CHECK(fs::exists(out / "modes.npy"));
  }
  SUBCASE("known linear map") {
    Rng rng(4);
    Eigen::MatrixXd A(6, 6);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.uniform(-0.3, 0.3);
    A += 0.6 * Eigen::MatrixXd::Identity(6, 6);
    Eigen::MatrixXd X(6, 30);
    for (Eigen::Index i = 0; i < 6; ++i) X(i, 0) = rng.uniform(-1.0, 1.0);
    for (Eigen::Index k = 1; k < 30; ++k) X.col(k) = A * X.col(k - 1);
    const fs::path p = scratch() / "linear.kbub";
    write_linear_dataset(p, X, 3, 2);
    const fs::path out = scratch() / "dmd_linear";
    REQUIRE(kbub_run({"dmd", "--config", write_config("dmd_linear", {{"dataset", p.string()}}).string(), "--out",
                      out.string()}) == 0);
    const json s = load_json(out / "spectrum.json");
    REQUIRE(s["eigenvalues"].size() == 6);
    Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
    std::vector<std::complex<double>> truth(es.eigenvalues().begin(), es.eigenvalues().end());
    for (const auto& e : s["eigenvalues"]) {
      const std::complex<double> z(e[0].get<double>(), e[1].get<double>());
      double best = 1e300;
      for (const auto& t : truth) best = std::min(best, std::abs(z - t));
      CHECK(best <= 1e-8);
    }
  }
}

TEST_CASE("heatmap export") {
  SUBCASE("half gray rounds down") {
    CHECK(gray_level(0.5, {0.0, 1.0}) == 127);
    CHECK(gray_level(0.0, {0.0, 1.0}) == 0);
    CHECK(gray_level(1.0, {0.0, 1.0}) == 255);
    CHECK(gray_level(2.0, {0.0, 1.0}) == 255);
    CHECK(gray_level(-1.0, {0.0, 1.0}) == 0);
    const std::vector<double> f(12, 0.5);
    const auto pgm = encode_pgm(f, 4, 3, ValueRange{0.0, 1.0});
    const std::string header = "P5\n4 3\n255\n";
    REQUIRE(pgm.size() == header.size() + 12);
    CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);
    for (std::size_t i = header.size(); i < pgm.size(); ++i) CHECK(pgm[i] == 127);
  }
  SUBCASE("auto range hits both ends and the top row comes first") {
    std::vector<double> f(6);
    for (std::size_t i = 0; i < 6; ++i) f[i] = static_cast<double>(i) - 2.0;
    const auto pgm = encode_pgm(f, 3, 2);
    const std::size_t h = pgm.size() - 6;
    CHECK(pgm[h + 0] == gray_level(1.0, {-2.0, 3.0}));  // row 1 (top) first
    CHECK(*std::min_element(pgm.begin() + static_cast<std::ptrdiff_t>(h), pgm.end()) == 0);
    CHECK(*std::max_element(pgm.begin() + static_cast<std::ptrdiff_t>(h), pgm.end()) == 255);
    CHECK(pgm[h + 3] == 0);
    CHECK(pgm[h + 2] == 255);
  }
  SUBCASE("CSV round trip at nine significant digits") {
    Rng rng(2);
    std::vector<double> f(20);
    for (double& v : f) v = rng.uniform(-1e3, 1e3);
    const fs::path stem = scratch() / "hm";
    export_heatmap(f, 5, 4, stem);
    int nx = 0, nz = 0;
    const auto back = read_csv_field(scratch() / "hm.csv", &nx, &nz);
    CHECK(nx == 5);
    CHECK(nz == 4);
    REQUIRE(back.size() == f.size());
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(back[i] == doctest::Approx(f[i]).epsilon(1e-8));
    CHECK(fs::exists(scratch() / "hm.pgm"));
  }
  SUBCASE("non-finite field") {
    std::vector<double> f(4, 0.0);
    f[2] = std::nan("");
    CHECK_THROWS_AS(encode_pgm(f, 2, 2), NumericalError);
    CHECK_THROWS_AS(encode_pgm(f, 3, 2), ShapeError);
  }
  SUBCASE("export subcommand from a dataset state") {
    const fs::path out = scratch() / "export";
    const auto cfg = write_config("export", {{"dataset", (small_dataset() / "dataset.kbub").string()},
                                             {"trajectory", 2},
                                             {"state", 3},
                                             {"name", "theta"}});
    REQUIRE(kbub_run({"export", "--config", cfg.string(), "--out", out.string()}) == 0);
    const Dataset ds = read_dataset(small_dataset() / "dataset.kbub");
    const Field theta = transform_variables(ds.records[2].states[3]).theta;
    int nx = 0, nz = 0;
    const auto back = read_csv_field(out / "theta.csv", &nx, &nz);
    CHECK(nx == 16);
    CHECK(nz == 16);
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == doctest::Approx(theta[i]).epsilon(1e-8));
  }
}

TEST_CASE("npy round trip") {
  const std::vector<double> v{1.0, -2.5, 3.25, 1e-300, 7.0, 8.0};
  write_npy(scratch() / "a.npy", {2, 3}, v);
  const NpyArray a = read_npy(scratch() / "a.npy");
  CHECK(a.shape == std::vector<std::size_t>{2, 3});
  CHECK(a.data == v);
  const auto raw = bytes(scratch() / "a.npy");
  CHECK((raw.size() - v.size() * 8) % 64 == 0);
}
