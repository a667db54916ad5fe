#include "kbub/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "kbub/byte_io.hpp"
#include "kbub/dataset.hpp"
#include "kbub/dmd.hpp"
#include "kbub/export.hpp"
#include "kbub/koopman.hpp"

namespace kbub::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kDefaultTrainRatio = 700.0 / 940.0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---- configuration ----

json weights_json(const LossWeights& w) {
  return {{"recon", w.recon}, {"pred", w.pred}, {"lin", w.lin}, {"noise", w.noise}, {"repl", w.repl}};
}

LossWeights weights_from(const json& j) {
  LossWeights w{j.at("recon").get<double>(), j.at("pred").get<double>(), j.at("lin").get<double>(),
                j.at("noise").get<double>(), j.at("repl").get<double>()};
  for (double v : {w.recon, w.pred, w.lin, w.noise, w.repl}) {
    if (!(v >= 0.0)) throw ConfigError("weights must be non-negative");
  }
  return w;
}

json model_json(const AEConfig& c) {
  return {{"channels", c.channels}, {"koopman_dim", c.koopman_dim}, {"head_channels", c.head_channels}, {"m", c.m}};
}

json defaults(const std::string& cmd, const std::string& preset) {
  const bool paper = preset == "paper";
  json d = {{"preset", preset}, {"seed", 0}};
  if (cmd == "generate") {
    d["n_trajectories"] = paper ? 940 : 20;
    d["nx"] = paper ? 100 : 32;
    d["nz"] = paper ? 100 : 32;
    d["n_steps"] = paper ? 215 : 40;
    d["output_interval_s"] = 5.0;
    d["cfl"] = 0.4;
    d["dtype"] = "f32";
    d["train_ratio"] = kDefaultTrainRatio;
  } else if (cmd == "train") {
    d["dataset"] = nullptr;
    d["variable"] = "theta";
    d["model"] = model_json(paper ? AEConfig::paper() : AEConfig::desk());
    d["lr"] = paper ? 1e-8 : 1e-4;
    d["max_epochs"] = paper ? 200 : 50;
    d["patience"] = 10;
    d["batch_size"] = 16;
    d["flip_augment"] = true;
    d["weights"] = weights_json({});
    d["train_ratio"] = kDefaultTrainRatio;
    d["resume"] = nullptr;
  } else if (cmd == "evaluate") {
    d["checkpoint"] = nullptr;
    d["dataset"] = nullptr;
    d["split"] = "val";
    d["weights"] = weights_json({});
  } else if (cmd == "rollout") {
    d["checkpoint"] = nullptr;
    d["dataset"] = nullptr;
    d["trajectory"] = nullptr;
    d["start"] = 0;
    d["steps"] = 215;
    d["latent"] = false;
    d["heatmap_every"] = 0;
  } else if (cmd == "dmd") {
    d["dataset"] = nullptr;
    d["trajectories"] = json::array({0});
    d["variable"] = "theta";
    d["rank"] = nullptr;
    d["rank_threshold"] = 1e-10;
    d["n_modes"] = 4;
  } else if (cmd == "export") {
    d["dataset"] = nullptr;
    d["trajectory"] = 0;
    d["state"] = 0;
    d["variable"] = "theta";
    d["normalized"] = false;
    d["npy"] = nullptr;
    d["frame"] = 0;
    d["range"] = nullptr;
    d["name"] = "field";
  }
  return d;
}

// Overlays `user` onto `base`, rejecting keys the defaults do not know.
void merge_into(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : user.items()) {
    if (where == "config" && key == "command") continue;
    if (!base.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    if (base[key].is_object() && value.is_object()) {
      merge_into(base[key], value, where + "." + key);
    } else {
      base[key] = value;
    }
  }
}

template <class T>
T get(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: '") + key + "' is missing or has the wrong type");
  }
}

fs::path required_path(const json& cfg, const char* key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) throw ConfigError(std::string("config: '") + key + "' is required");
  return fs::path(get<std::string>(cfg, key));
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

json breakdown_json(const LossBreakdown& b) {
  return {{"recon", b.recon}, {"pred", b.pred}, {"lin", b.lin},
          {"noise", b.noise}, {"repl", b.repl}, {"total", b.total}};
}

json domain_json(const BubbleDomain& d) {
  auto iv = [](const Interval& i) { return json::array({i.lo, i.hi}); };
  return {{"temp_k", iv(d.temp_k)},     {"radius_m", iv(d.radius_m)}, {"cx_m", iv(d.cx_m)},
          {"cz_m", iv(d.cz_m)},         {"stability_m", d.stability_m}, {"count", {d.min_count, d.max_count}}};
}

json stats_json(const NormStats& s) {
  json j = json::object();
  for (int v = 0; v < kNumVariables; ++v) {
    j[variable_name(static_cast<Variable>(v))] = {{"mean", s.mean[v]}, {"std", s.std[v]}};
  }
  return j;
}

NormStats stats_from(const json& j) {
  NormStats s;
  for (int v = 0; v < kNumVariables; ++v) {
    const json& e = j.at(variable_name(static_cast<Variable>(v)));
    s.mean[v] = e.at("mean").get<double>();
    s.std[v] = e.at("std").get<double>();
  }
  return s;
}

// ---- datasets and checkpoints ----

struct LoadedDataset {
  Dataset data;
  std::optional<SplitIndices> split;  // from the sidecar when present
  double interval = 5.0;
};

LoadedDataset load_dataset(const fs::path& path) {
  LoadedDataset out;
  fs::path side = path;
  side.replace_extension(".json");
  std::optional<json> meta;
  if (fs::exists(side)) {
    meta = read_json(side);
    try {
      out.interval = meta->at("output_interval_s").get<double>();
    } catch (const json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
  }
  out.data = read_dataset(path, out.interval);
  if (meta && meta->contains("split")) {
    try {
      SplitIndices s;
      s.train = meta->at("split").at("train").get<std::vector<std::size_t>>();
      s.val = meta->at("split").at("val").get<std::vector<std::size_t>>();
      for (auto* v : {&s.train, &s.val}) {
        for (std::size_t i : *v) {
          if (i >= out.data.records.size()) throw DataError(side.string() + ": split index out of range");
        }
      }
      out.split = s;
    } catch (const json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = k;
  return v;
}

struct Checkpoint {
  AEConfig config;
  Variable variable = Variable::theta;
  NormStats stats;
};

json checkpoint_json(const Checkpoint& c) {
  json m = model_json(c.config);
  m["in_channels"] = c.config.in_channels;
  m["height"] = c.config.height;
  m["width"] = c.config.width;
  return {{"format", "kbub model"}, {"model", m}, {"variable", variable_name(c.variable)}, {"stats", stats_json(c.stats)}};
}

Checkpoint read_checkpoint_meta(const fs::path& dir) {
  const json j = read_json(dir / "model.json");
  try {
    Checkpoint c;
    const json& m = j.at("model");
    c.config.in_channels = m.at("in_channels").get<std::size_t>();
    c.config.height = m.at("height").get<std::size_t>();
    c.config.width = m.at("width").get<std::size_t>();
    c.config.channels = m.at("channels").get<std::vector<std::size_t>>();
    c.config.koopman_dim = m.at("koopman_dim").get<std::size_t>();
    c.config.head_channels = m.at("head_channels").get<std::size_t>();
    c.config.m = m.at("m").get<int>();
    c.variable = parse_variable(j.at("variable").get<std::string>());
    c.stats = stats_from(j.at("stats"));
    return c;
  } catch (const json::exception& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
}

struct LoadedModel {
  Checkpoint meta;
  std::unique_ptr<KoopmanAE> model;
};

LoadedModel load_model(const fs::path& dir) {
  LoadedModel out;
  out.meta = read_checkpoint_meta(dir);
  try {
    out.meta.config.validate();
  } catch (const ConfigError& e) {
    throw DataError((dir / "model.json").string() + ": " + e.what());
  }
  out.model = std::make_unique<KoopmanAE>(out.meta.config, 0);
  ad::assign_parameters(out.model->parameters(), ad::load_parameters(dir / "model.kprm"));
  return out;
}

void check_grid(const AEConfig& c, const Dataset& d) {
  if (c.height != static_cast<std::size_t>(d.nz) || c.width != static_cast<std::size_t>(d.nx)) {
    throw ShapeError("checkpoint expects " + std::to_string(c.height) + " x " + std::to_string(c.width) +
                     " fields, dataset holds " + std::to_string(d.nz) + " x " + std::to_string(d.nx));
  }
}

// ---- subcommands ----

using Log = std::ostream&;

void cmd_generate(const json& cfg, const fs::path& out, Log log) {
  const auto t0 = Clock::now();
  ScenarioConfig sc;
  sc.seed = get<std::uint64_t>(cfg, "seed");
  sc.n_steps = get<int>(cfg, "n_steps");
  sc.output_interval_s = get<double>(cfg, "output_interval_s");
  sc.cfl = get<double>(cfg, "cfl");
  sc.grid.nx = get<int>(cfg, "nx");
  sc.grid.nz = get<int>(cfg, "nz");
  sc.validate();
  const auto n = get<std::int64_t>(cfg, "n_trajectories");
  if (n < 1) throw ConfigError("config: n_trajectories must be >= 1");
  const std::string dtype_name = get<std::string>(cfg, "dtype");
  if (dtype_name != "f32" && dtype_name != "f64") throw ConfigError("config: dtype must be \"f32\" or \"f64\"");
  const PayloadType dtype = dtype_name == "f32" ? PayloadType::f32 : PayloadType::f64;
  const double ratio = get<double>(cfg, "train_ratio");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("config: train_ratio must lie in (0, 1)");

  std::vector<TrajectoryRecord> records;
  std::vector<std::size_t> source;
  json discarded = json::array();
  json per_traj = json::array();
  for (std::int64_t k = 0; k < n; ++k) {
    const auto tk = Clock::now();
    try {
      records.push_back(quantize(generate_trajectory(sc, static_cast<std::uint64_t>(k)), dtype));
      source.push_back(static_cast<std::size_t>(k));
      log << "[generate] trajectory " << k + 1 << "/" << n << ": " << records.back().n_saved() << " states"
          << (records.back().truncated ? " (truncated)" : "") << "\n";
    } catch (const GenerationError& e) {
      discarded.push_back({{"index", k}, {"reason", e.what()}});
      log << "[generate] trajectory " << k + 1 << "/" << n << " discarded: " << e.what() << "\n";
    }
    per_traj.push_back(seconds_since(tk));
  }
  if (records.empty()) throw NumericalError("generate: every scenario failed");

  SplitIndices split;
  if (records.size() >= 2) {
    split = split_dataset(records.size(), ratio, sc.seed);
  } else {
    split.train = {0};
  }
  std::vector<TrajectoryRecord> train_records;
  for (std::size_t i : split.train) train_records.push_back(records[i]);
  const NormStats stats = compute_norm_stats(train_records);

  fs::create_directories(out);
  write_dataset(out / "dataset.kbub", records, stats, sc.grid.nx, sc.grid.nz, dtype);

  json recs = json::array();
  std::size_t n_trunc = 0, saved_total = 0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    json specs = json::array();
    for (const auto& s : records[r].specs) {
      specs.push_back({{"kind", s.kind == BubbleKind::hot ? "hot" : "cold"},
                       {"temp_k", s.temp_k},
                       {"radius_m", s.radius_m},
                       {"stability_m", s.stability_m},
                       {"cx_m", s.cx_m},
                       {"cz_m", s.cz_m}});
    }
    json times = json::array();
    for (const auto& st : records[r].states) times.push_back(st.time);
    recs.push_back({{"record", r},
                    {"scenario", source[r]},
                    {"specs", specs},
                    {"truncated", records[r].truncated},
                    {"n_saved", records[r].n_saved()},
                    {"times_s", times}});
    n_trunc += records[r].truncated ? 1 : 0;
    saved_total += records[r].n_saved();
  }
  const json meta = {
      {"format", "kbub dataset sidecar"},
      {"file", "dataset.kbub"},
      {"nx", sc.grid.nx},
      {"nz", sc.grid.nz},
      {"lx_m", sc.grid.lx},
      {"lz_m", sc.grid.lz},
      {"output_interval_s", sc.output_interval_s},
      {"n_steps", sc.n_steps},
      {"dtype", dtype_name},
      {"seed", sc.seed},
      {"cfl", sc.cfl},
      {"domains", {{"hot", domain_json(sc.domains.hot)}, {"cold", domain_json(sc.domains.cold)}}},
      {"constants",
       {{"g", sc.consts.g},
        {"r_d", sc.consts.r_d},
        {"gamma", sc.consts.gamma},
        {"p0", sc.consts.p0},
        {"c_p", sc.consts.c_p},
        {"theta0", sc.consts.theta0}}},
      {"stats_source", "train split"},
      {"stats", stats_json(stats)},
      {"split", {{"train", split.train}, {"val", split.val}}},
      {"truncation",
       {{"requested", n},
        {"written", records.size()},
        {"truncated", n_trunc},
        {"discarded", discarded},
        {"mean_saved_states", static_cast<double>(saved_total) / static_cast<double>(records.size())}}},
      {"records", recs}};
  write_json(out / "dataset.json", meta);
  write_json(out / "timing.json", {{"total_s", seconds_since(t0)}, {"per_trajectory_s", per_traj}});
  log << "[generate] wrote " << records.size() << " trajectories (" << n_trunc << " truncated, "
      << discarded.size() << " discarded) to " << (out / "dataset.kbub").string() << "\n";
}

void cmd_train(const json& cfg, const fs::path& out, Log log) {
  const auto t0 = Clock::now();
  const fs::path dpath = required_path(cfg, "dataset");
  const std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
  const Variable var = parse_variable(get<std::string>(cfg, "variable"));
  TrainConfig tc;
  tc.weights = weights_from(cfg.at("weights"));
  tc.lr = get<double>(cfg, "lr");
  tc.max_epochs = get<int>(cfg, "max_epochs");
  tc.patience = get<int>(cfg, "patience");
  tc.batch_size = get<std::size_t>(cfg, "batch_size");
  tc.flip_augment = get<bool>(cfg, "flip_augment");
  tc.seed = seed;

  const LoadedDataset ld = load_dataset(dpath);
  const Dataset& ds = ld.data;
  SplitIndices split;
  if (ld.split) {
    split = *ld.split;
  } else if (ds.records.size() >= 2) {
    split = split_dataset(ds.records.size(), get<double>(cfg, "train_ratio"), seed);
  } else {
    split.train = {0};
  }

  Checkpoint ck;
  ck.variable = var;
  ck.stats = ds.stats;
  const json& m = cfg.at("model");
  try {
    ck.config.channels = m.at("channels").get<std::vector<std::size_t>>();
    ck.config.koopman_dim = m.at("koopman_dim").get<std::size_t>();
    ck.config.head_channels = m.at("head_channels").get<std::size_t>();
    ck.config.m = m.at("m").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: model: ") + e.what());
  }
  ck.config.height = static_cast<std::size_t>(ds.nz);
  ck.config.width = static_cast<std::size_t>(ds.nx);
  ck.config.validate();

  const auto nx = static_cast<std::size_t>(ds.nx), nz = static_cast<std::size_t>(ds.nz);
  const SequenceSet tr = make_sequences(ds.records, split.train, ds.stats, var, nx, nz);
  const SequenceSet va = make_sequences(ds.records, split.val, ds.stats, var, nx, nz);

  KoopmanAE model(ck.config, seed);
  ad::Adam opt(model.parameters(), {tc.lr});
  std::uint64_t resumed_from = 0;
  if (!cfg.at("resume").is_null()) {
    const fs::path rdir = required_path(cfg, "resume");
    const Checkpoint prev = read_checkpoint_meta(rdir);
    if (checkpoint_json(prev)["model"] != checkpoint_json(ck)["model"]) {
      throw ShapeError("resume: checkpoint architecture differs from the configured model");
    }
    ad::assign_parameters(model.parameters(), ad::load_parameters(rdir / "model.kprm"));
    opt.load_state(ad::load_parameters(rdir / "optimizer.kprm"));
    resumed_from = opt.steps();
  }
  log << "[train] " << tr.n_pairs() << " training pairs, " << va.n_pairs() << " validation pairs, "
      << ad::parameter_count(model.parameters()) << " parameters\n";

  json epoch_seconds = json::array();
  auto on_epoch = [&](const EpochRecord& e) {
    epoch_seconds.push_back(e.seconds);
    log << "[train] epoch " << e.epoch << ": train " << e.train.total << ", val " << e.val.total << " ("
        << e.seconds << " s)\n";
  };

  fs::create_directories(out);
  auto write_outputs = [&](const TrainReport& rep, const std::string& error) {
    ad::save_parameters(out / "model.kprm", model.parameters());
    ad::save_parameters(out / "optimizer.kprm", opt.state());
    write_json(out / "model.json", checkpoint_json(ck));
    json epochs = json::array();
    json best_so_far = json::array();
    double best = 0.0;
    for (const auto& e : rep.epochs) {
      epochs.push_back({{"epoch", e.epoch}, {"train", breakdown_json(e.train)}, {"val", breakdown_json(e.val)}});
      best = best_so_far.empty() ? e.val.total : std::min(best, e.val.total);
      best_so_far.push_back(best);
    }
    json report = {{"epochs", epochs},
                   {"best_so_far", best_so_far},
                   {"best_epoch", rep.best_epoch},
                   {"best_val", rep.best_val},
                   {"stop_reason", rep.stop_reason},
                   {"n_train_pairs", tr.n_pairs()},
                   {"n_val_pairs", va.n_pairs()},
                   {"validation_source", va.n_pairs() > 0 ? "val split" : "train split"},
                   {"parameter_count", ad::parameter_count(model.parameters())},
                   {"optimizer_steps", opt.steps()},
                   {"resumed_from_step", resumed_from}};
    if (!error.empty()) report["error"] = error;
    write_json(out / "report.json", report);
    write_json(out / "timing.json", {{"total_s", seconds_since(t0)}, {"epoch_s", epoch_seconds}});
  };

  try {
    const TrainReport rep = train(model, tr, va, tc, &opt, on_epoch);
    write_outputs(rep, "");
    log << "[train] stopped (" << rep.stop_reason << ") after " << rep.epochs.size() << " epochs; best epoch "
        << rep.best_epoch << " with validation objective " << rep.best_val << "\n";
  } catch (const TrainingError& e) {
    write_outputs(e.report(), e.what());
    throw;
  }
}

void cmd_evaluate(const json& cfg, const fs::path& out, Log log) {
  const auto t0 = Clock::now();
  const LoadedModel lm = load_model(required_path(cfg, "checkpoint"));
  const LoadedDataset ld = load_dataset(required_path(cfg, "dataset"));
  check_grid(lm.meta.config, ld.data);
  const std::string which = get<std::string>(cfg, "split");
  std::vector<std::size_t> idx;
  if (which == "all") {
    idx = all_indices(ld.data.records.size());
  } else if (which == "train" || which == "val") {
    if (!ld.split) throw DataError("evaluate: the dataset has no split; use \"split\": \"all\"");
    idx = which == "train" ? ld.split->train : ld.split->val;
  } else {
    throw ConfigError("config: split must be \"train\", \"val\" or \"all\"");
  }
  const SequenceSet s = make_sequences(ld.data.records, idx, lm.meta.stats, lm.meta.variable,
                                       static_cast<std::size_t>(ld.data.nx), static_cast<std::size_t>(ld.data.nz));
  const EvalMetrics em = evaluate_model(*lm.model, s, weights_from(cfg.at("weights")));
  json samples = json::array();
  for (const auto& p : em.samples) {
    samples.push_back({{"trajectory", idx[p.trajectory]},
                       {"pair", p.pair},
                       {"recon_mse", p.recon_mse},
                       {"pred_mse", p.pred_mse},
                       {"recon_l2", p.recon_l2},
                       {"pred_l2", p.pred_l2}});
  }
  fs::create_directories(out);
  write_json(out / "metrics.json",
             {{"split", which},
              {"variable", variable_name(lm.meta.variable)},
              {"space", "normalized"},
              {"n_pairs", em.n_pairs},
              {"aggregate",
               {{"recon_mse", em.recon_mse}, {"pred_mse", em.pred_mse}, {"recon_l2", em.recon_l2}, {"pred_l2", em.pred_l2}}},
              {"losses", breakdown_json(em.losses)},
              {"per_sample", samples}});
  write_json(out / "timing.json", {{"total_s", seconds_since(t0)}});
  log << "[evaluate] " << em.n_pairs << " pairs: reconstruction MSE " << em.recon_mse << ", prediction MSE "
      << em.pred_mse << ", objective " << em.losses.total << "\n";
}

// Returns false when the rollout stopped on a non-finite state.
bool cmd_rollout(const json& cfg, const fs::path& out, Log log) {
  const auto t0 = Clock::now();
  const LoadedModel lm = load_model(required_path(cfg, "checkpoint"));
  const LoadedDataset ld = load_dataset(required_path(cfg, "dataset"));
  check_grid(lm.meta.config, ld.data);
  std::size_t traj = 0;
  if (!cfg.at("trajectory").is_null()) {
    traj = get<std::size_t>(cfg, "trajectory");
  } else if (ld.split && !ld.split->val.empty()) {
    traj = ld.split->val.front();
  }
  if (traj >= ld.data.records.size()) throw DataError("rollout: trajectory index out of range");
  const auto start = get<std::size_t>(cfg, "start");
  const int steps = get<int>(cfg, "steps");
  if (steps < 0) throw ConfigError("config: steps must be >= 0");
  const bool latent = get<bool>(cfg, "latent");
  const int every = get<int>(cfg, "heatmap_every");

  const auto nx = static_cast<std::size_t>(ld.data.nx), nz = static_cast<std::size_t>(ld.data.nz);
  const SequenceSet s = make_sequences(ld.data.records, std::vector<std::size_t>{traj}, lm.meta.stats,
                                       lm.meta.variable, nx, nz);
  const auto& truth = s.trajectories.front();
  if (start >= truth.size()) throw DataError("rollout: start index beyond the trajectory");
  const auto states =
      rollout(*lm.model, truth[start], steps, latent ? RolloutMode::latent : RolloutMode::closed_loop);

  fs::create_directories(out);
  std::vector<double> phys;
  phys.reserve(states.size() * nx * nz);
  json mse = json::array();
  for (std::size_t n = 0; n < states.size(); ++n) {
    const Field f = lm.meta.stats.denormalize(states[n].data(), lm.meta.variable);
    phys.insert(phys.end(), f.begin(), f.end());
    if (start + n < truth.size()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < states[n].numel(); ++i) {
        const double d = states[n].data()[i] - truth[start + n].data()[i];
        acc += d * d;
      }
      mse.push_back(acc / static_cast<double>(states[n].numel()));
    }
    if (every > 0 && n % static_cast<std::size_t>(every) == 0) {
      fs::create_directories(out / "frames");
      char name[32];
      std::snprintf(name, sizeof name, "step_%04zu", n);
      export_heatmap(f, ld.data.nx, ld.data.nz, out / "frames" / name);
    }
  }
  write_npy(out / "predictions.npy", {states.size(), nz, nx}, phys);
  const int completed = static_cast<int>(states.size()) - 1;
  const bool stopped = completed < steps;
  write_json(out / "divergence.json", {{"trajectory", traj},
                                       {"start", start},
                                       {"mode", latent ? "latent" : "closed_loop"},
                                       {"variable", variable_name(lm.meta.variable)},
                                       {"steps_requested", steps},
                                       {"steps_completed", std::max(completed, 0)},
                                       {"stopped_early", stopped},
                                       {"mse_space", "normalized"},
                                       {"mse", mse}});
  write_json(out / "timing.json", {{"total_s", seconds_since(t0)}});
  log << "[rollout] " << std::max(completed, 0) << " of " << steps << " steps"
      << (stopped ? " (stopped on a non-finite state)" : "") << "\n";
  return !stopped;
}

void cmd_dmd(const json& cfg, const fs::path& out, Log log) {
  const auto t0 = Clock::now();
  const LoadedDataset ld = load_dataset(required_path(cfg, "dataset"));
  const Variable var = parse_variable(get<std::string>(cfg, "variable"));
  const auto trajs = get<std::vector<std::size_t>>(cfg, "trajectories");
  if (trajs.empty()) throw ConfigError("config: trajectories must not be empty");
  std::vector<SnapshotMatrix> parts;
  Eigen::Index cols = 0;
  for (std::size_t t : trajs) {
    if (t >= ld.data.records.size()) throw DataError("dmd: trajectory index out of range");
    parts.push_back(build_snapshots(ld.data.records[t], var, ld.data.stats));
    cols += parts.back().X.cols();
  }
  SnapshotMatrix s;
  s.X.resize(parts.front().X.rows(), cols);
  s.Xp.resize(parts.front().X.rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    s.X.middleCols(c, p.X.cols()) = p.X;
    s.Xp.middleCols(c, p.X.cols()) = p.Xp;
    c += p.X.cols();
  }
  DMDOptions opts;
  if (!cfg.at("rank").is_null()) {
    const auto r = get<std::int64_t>(cfg, "rank");
    if (r < 1) throw ConfigError("config: rank must be >= 1");
    opts.rank = static_cast<std::size_t>(r);
  }
  opts.rank_threshold = get<double>(cfg, "rank_threshold");
  const DMDResult r = fit_dmd(s, opts);

  auto pairs = [](const Eigen::VectorXcd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back({v(i).real(), v(i).imag()});
    return a;
  };
  json sv = json::array();
  for (Eigen::Index i = 0; i < r.singular_values.size(); ++i) sv.push_back(r.singular_values(i));
  fs::create_directories(out);
  write_json(out / "spectrum.json", {{"variable", variable_name(var)},
                                     {"trajectories", trajs},
                                     {"rank", r.rank},
                                     {"eigenvalues", pairs(r.eigenvalues)},
                                     {"singular_values", sv},
                                     {"amplitudes", pairs(r.amplitudes)},
                                     {"one_step_residual", one_step_residual(r, s)}});

  const auto nx = static_cast<std::size_t>(ld.data.nx), nz = static_cast<std::size_t>(ld.data.nz);
  std::vector<std::complex<double>> modes;
  modes.reserve(r.rank * nx * nz);
  for (Eigen::Index k = 0; k < r.modes.cols(); ++k) {
    for (Eigen::Index i = 0; i < r.modes.rows(); ++i) modes.push_back(r.modes(i, k));
  }
  write_npy(out / "modes.npy", {r.rank, nz, nx}, modes);
  const auto n_modes = std::min<std::size_t>(get<std::size_t>(cfg, "n_modes"), r.rank);
  for (std::size_t k = 0; k < n_modes; ++k) {
    const Eigen::VectorXd re = r.modes.col(static_cast<Eigen::Index>(k)).real();
    export_heatmap({re.data(), static_cast<std::size_t>(re.size())}, ld.data.nx, ld.data.nz,
                   out / ("mode_" + std::to_string(k)));
  }
  write_json(out / "timing.json", {{"total_s", seconds_since(t0)}});
  log << "[dmd] rank " << r.rank << ", leading |lambda| = " << std::abs(r.eigenvalues(0)) << "\n";
}

void cmd_export(const json& cfg, const fs::path& out, Log log) {
  std::vector<double> field;
  int nx = 0, nz = 0;
  if (!cfg.at("npy").is_null()) {
    const NpyArray a = read_npy(required_path(cfg, "npy"));
    std::size_t frames = 1;
    if (a.shape.size() == 3) {
      frames = a.shape[0];
    } else if (a.shape.size() != 2) {
      throw DataError("export: expected a [nz, nx] or [frames, nz, nx] array");
    }
    const auto frame = get<std::size_t>(cfg, "frame");
    if (frame >= frames) throw DataError("export: frame index out of range");
    nz = static_cast<int>(a.shape[a.shape.size() - 2]);
    nx = static_cast<int>(a.shape[a.shape.size() - 1]);
    const std::size_t n = static_cast<std::size_t>(nx) * static_cast<std::size_t>(nz);
    field.assign(a.data.begin() + static_cast<std::ptrdiff_t>(frame * n),
                 a.data.begin() + static_cast<std::ptrdiff_t>((frame + 1) * n));
  } else {
    const LoadedDataset ld = load_dataset(required_path(cfg, "dataset"));
    const auto t = get<std::size_t>(cfg, "trajectory");
    const auto k = get<std::size_t>(cfg, "state");
    if (t >= ld.data.records.size()) throw DataError("export: trajectory index out of range");
    if (k >= ld.data.records[t].n_saved()) throw DataError("export: state index out of range");
    const Variable var = parse_variable(get<std::string>(cfg, "variable"));
    const TransformedState tf = transform_variables(ld.data.records[t].states[k]);
    field = get<bool>(cfg, "normalized") ? ld.data.stats.normalize(tf.get(var), var) : tf.get(var);
    nx = ld.data.nx;
    nz = ld.data.nz;
  }
  std::optional<ValueRange> range;
  if (!cfg.at("range").is_null()) {
    const auto lim = get<std::vector<double>>(cfg, "range");
    if (lim.size() != 2 || !(lim[1] > lim[0])) throw ConfigError("config: range must be [lo, hi] with lo < hi");
    range = ValueRange{lim[0], lim[1]};
  }
  const std::string name = get<std::string>(cfg, "name");
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("config: name must be a plain file stem");
  fs::create_directories(out);
  export_heatmap(field, nx, nz, out / name, range);
  log << "[export] wrote " << (out / (name + ".pgm")).string() << "\n";
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "kbub: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Rising-bubble simulation, Koopman autoencoder training and DMD analysis", "kbub"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir, preset;
  std::optional<std::uint64_t> seed;
  bool latent = false;
  app.add_option("--config", config_path, "JSON parameter document");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--preset", preset, "parameter preset")->check(CLI::IsMember({"desk", "paper"}));
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"generate", "simulate random bubble scenarios into a dataset"},
      {"train", "train the Koopman autoencoder"},
      {"evaluate", "reconstruction and prediction metrics"},
      {"rollout", "closed-loop prediction from an initial state"},
      {"dmd", "dynamic mode decomposition of dataset trajectories"},
      {"export", "write a field as PGM + CSV"}};
  for (const auto& [name, help] : cmds) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (name == "rollout") sub->add_flag("--latent-rollout", latent, "iterate K in latent space");
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    json user = json::object();
    if (!config_path.empty()) {
      const auto bytes = read_file(config_path);
      try {
        user = json::parse(bytes.begin(), bytes.end());
      } catch (const json::exception& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
      if (!user.is_object()) throw ConfigError(config_path + ": expected a JSON object");
      if (user.contains("command") && user["command"] != cmd) {
        throw ConfigError(config_path + ": written for '" + user["command"].dump() + "', not '" + cmd + "'");
      }
    }
    if (preset.empty()) preset = user.value("preset", std::string("desk"));
    if (preset != "desk" && preset != "paper") throw ConfigError("preset must be \"desk\" or \"paper\"");
    json cfg = defaults(cmd, preset);
    merge_into(cfg, user, "config");
    cfg["preset"] = preset;
    if (seed) cfg["seed"] = *seed;
    if (latent) cfg["latent"] = true;
    const fs::path out = out_dir.empty() ? fs::path(cmd + "_out") : fs::path(out_dir);

    fs::create_directories(out);
    json echo = cfg;
    echo["command"] = cmd;
    write_json(out / "config.json", echo);

    std::ostream& log = std::cerr;
    if (cmd == "generate") {
      cmd_generate(cfg, out, log);
    } else if (cmd == "train") {
      cmd_train(cfg, out, log);
    } else if (cmd == "evaluate") {
      cmd_evaluate(cfg, out, log);
    } else if (cmd == "rollout") {
      if (!cmd_rollout(cfg, out, log)) return kNumericalError;
    } else if (cmd == "dmd") {
      cmd_dmd(cfg, out, log);
    } else {
      cmd_export(cfg, out, log);
    }
    return kOk;
  } catch (const ConfigError& e) {
    return report("config error", e, kConfigError);
  } catch (const json::exception& e) {
    return report("config error", e, kConfigError);
  } catch (const DataError& e) {
    return report("data error", e, kDataError);
  } catch (const ShapeError& e) {
    return report("data error", e, kDataError);
  } catch (const fs::filesystem_error& e) {
    return report("data error", e, kDataError);
  } catch (const NumericalError& e) {
    return report("numerical failure", e, kNumericalError);
  } catch (const DomainError& e) {
    return report("numerical failure", e, kNumericalError);
  } catch (const std::exception& e) {
    return report("error", e, kFailure);
  }
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace kbub::cli
