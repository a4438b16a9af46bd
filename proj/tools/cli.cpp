#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rbflow/checks.hpp"
#include "rbflow/config.hpp"
#include "rbflow/coupling.hpp"
#include "rbflow/errors.hpp"
#include "rbflow/estimators.hpp"
#include "rbflow/hist.hpp"
#include "rbflow/sampling.hpp"
#include "rbflow/targets.hpp"
#include "rbflow/train.hpp"

namespace rbflow::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Stage indices for RunConfig::stage_seed.
constexpr int kStageData = 0;
constexpr int kStageTrain = 1;
constexpr int kStageSample = 2;
constexpr int kStageEstimate = 3;
constexpr int kStageMbar = 4;
constexpr int kStageLadder = 100;

struct Context {
  RunConfig cfg;
  fs::path out;
  bool quiet = false;
  std::ostream* log = nullptr;

  std::ostream& say() const {
    static std::ofstream null;
    return quiet ? null : *log;
  }
  std::string path(const std::string& name) const { return (out / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot write " + path);
  f << text;
  if (!f) throw ValidationError("cannot write " + path);
}

std::string ladder_file(int k) { return "ladder_" + std::to_string(k) + ".txt"; }

void require_crystal(const Context& c, const std::string& what) {
  if (c.cfg.experiment != "crystal") throw ValidationError(what + " needs the crystal experiment");
}

Dataset read_data(const Context& c, const std::string& path) {
  Dataset ds = dataset_read(path);
  if (ds.meta.kind != c.cfg.experiment)
    throw ValidationError(path + " holds " + ds.meta.kind + " data but the config is " + c.cfg.experiment);
  return ds;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> i(n);
  for (std::size_t k = 0; k < n; ++k) i[k] = k;
  return i;
}

std::vector<double> pick(const std::vector<double>& x, const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json estimate_json(const FreeEnergyEstimate& e, double n_molecules) {
  json j;
  j["method"] = e.method;
  j["delta_f"] = e.delta_f;
  j["sigma"] = e.sigma;
  j["two_sigma"] = 2.0 * e.sigma;
  if (e.per_molecule) {
    j["delta_f_per_molecule"] = e.delta_f / n_molecules;
    j["two_sigma_per_molecule"] = 2.0 * e.sigma / n_molecules;
  }
  j["bootstrap_resamples"] = e.resamples;
  j["counts"] = e.counts;
  return j;
}

// ---------------------------------------------------------------------------

Dataset tetra_generate(const RunConfig& cfg) {
  McmcConfig mc = cfg.sampler;
  mc.seed = cfg.stage_seed(kStageData);
  const BodyTemplate body = methane_template();
  Dataset ds = mcmc_run(TetraTarget(cfg.field, body, cfg.tetra_temperature), PoseSet{body, {RigidPose{}}}, mc);
  ds.meta.kind = "tetra";
  ds.meta.temperature = cfg.tetra_temperature;
  return ds;
}

Dataset crystal_generate(const RunConfig& cfg, double temperature, std::uint64_t seed) {
  McmcConfig mc = cfg.sampler;
  mc.seed = seed;
  const ToyCrystal model(cfg.crystal);
  Dataset ds = mcmc_run(CrystalTarget(model, temperature, cfg.arch.crystal.fixed), crystal_reference(model), mc);
  ds.meta.kind = "crystal";
  ds.meta.temperature = temperature;
  return ds;
}

void cmd_gen_data(const Context& c) {
  const RunConfig& cfg = c.cfg;
  if (cfg.experiment == "tetra") {
    const Dataset ds = tetra_generate(cfg);
    write_file(c.path("data.txt"), dataset_to_string(ds));
    c.say() << "data.txt: " << ds.frames.size() << " frames, acceptance " << ds.meta.acceptance << "\n";
    return;
  }
  const Dataset ds = crystal_generate(cfg, cfg.base_temperature, cfg.stage_seed(kStageData));
  write_file(c.path("data.txt"), dataset_to_string(ds));
  c.say() << "data.txt: " << ds.frames.size() << " frames at T = " << cfg.base_temperature << ", acceptance "
          << ds.meta.acceptance << "\n";
  const auto temps = geometric_ladder(cfg.base_temperature, cfg.target_temperature, cfg.ladder_rungs);
  for (int k = 0; k < cfg.ladder_rungs; ++k) {
    const Dataset rung = crystal_generate(cfg, temps[k], cfg.stage_seed(kStageLadder + k));
    write_file(c.path(ladder_file(k)), dataset_to_string(rung));
    c.say() << ladder_file(k) << ": " << rung.frames.size() << " frames at T = " << temps[k] << ", acceptance "
            << rung.meta.acceptance << "\n";
  }
}

void cmd_train(const Context& c, const std::string& data_path) {
  const Dataset ds = read_data(c, data_path);
  TrainConfig tc = c.cfg.train;
  tc.seed = c.cfg.stage_seed(kStageTrain);
  const long long total = tc.total_steps();
  const long long every = std::max(1LL, total / 20);
  const StepHook hook = [&](const StepRecord& r) {
    if ((r.step + 1) % every == 0 || r.step + 1 == total)
      c.say() << "step " << r.step + 1 << "/" << total << " loss " << r.loss << " lr " << r.lr << "\n";
  };
  TrainResult res = c.cfg.experiment == "tetra"
                        ? train_tetra(ds, c.cfg.arch.tetra, tc, hook)
                        : train_crystal(ds, c.cfg.arch.crystal, c.cfg.crystal, tc, hook);
  model_write(*res.stack, c.path("model.json"));
  write_file(c.path("train_log.jsonl"), res.log.records());
  json summary = json::parse(res.log.summary);
  summary["inputs"] = {{"data", file_digest(data_path)}};
  write_file(c.path("train_summary.json"), dump(summary));
  for (const auto& e : res.log.epochs)
    c.say() << "epoch " << e.epoch << " mean loss " << e.mean_loss << " eval " << e.eval << "\n";
}

// Held-out frames of a crystal dataset under the training split.
std::vector<PoseSet> crystal_eval_frames(const Context& c, const Dataset& ds) {
  std::vector<std::size_t> train, eval;
  split_indices(ds.frames.size(), c.cfg.train.eval_fraction, train, eval);
  std::vector<PoseSet> out;
  for (auto i : eval) out.push_back(ds.frames[i]);
  return out;
}

void cmd_sample(const Context& c, const std::string& model_path, const std::string& data_path, int count) {
  const auto stack = model_read(model_path);
  Dataset out;
  std::vector<double> log_density;
  if (!stack->is_crystal()) {
    Rng rng(c.cfg.stage_seed(kStageSample));
    FlowSamples s = flow_sample(*stack, rng, count);
    out.meta.kind = "tetra";
    out.meta.body = stack->body;
    out.meta.n_bodies = 1;
    out.meta.temperature = c.cfg.tetra_temperature;
    out.meta.seed = c.cfg.stage_seed(kStageSample);
    out.frames = std::move(s.poses);
    log_density = std::move(s.log_density);
  } else {
    // Crystal samples are the held-out base frames pushed through the map;
    // their density is exp(-u0(x)) / |J| up to the base normalizer.
    const Dataset ds = read_data(c, data_path);
    const auto base = crystal_eval_frames(c, ds);
    const PushResult push = flow_push(*stack, base);
    const ToyCrystal model(c.cfg.crystal);
    out.meta = ds.meta;
    out.meta.temperature = c.cfg.target_temperature;
    out.frames = push.poses;
    for (std::size_t i = 0; i < base.size(); ++i)
      log_density.push_back(-crystal_energy(base[i], model) / c.cfg.base_temperature - push.logdet[i]);
  }
  write_file(c.path("samples.txt"), dataset_to_string(out));
  std::string text;
  for (double v : log_density) text += format_double(v) + "\n";
  write_file(c.path("samples_logdensity.txt"), text);
  c.say() << "samples.txt: " << out.frames.size() << " frames\n";
}

void cmd_estimate(const Context& c, const std::string& model_path, const std::string& data_path) {
  const auto stack = model_read(model_path);
  const RunConfig& cfg = c.cfg;
  std::vector<double> works;
  json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  if (!stack->is_crystal()) {
    // Importance sampling of the rotation target, extended by the standard
    // normal on the auxiliary variables, with flow samples as proposals.
    Rng rng(cfg.stage_seed(kStageEstimate));
    const FlowSamples s = flow_sample(*stack, rng, cfg.sample_count);
    const BodyTemplate body = methane_template();
    for (std::size_t i = 0; i < s.states.size(); ++i) {
      const auto& z = s.states[i].z;
      const double log_aux = -0.5 * z.squaredNorm() - 0.5 * double(z.size()) * std::log(2.0 * M_PI);
      const double u = tetra_energy(s.states[i].q, body, cfg.field) / cfg.tetra_temperature;
      works.push_back(u - log_aux + s.log_density[i]);
    }
    j["target"] = "tetra rotation density at the configured temperature";
    j["inputs"] = {{"model", file_digest(model_path)}};
  } else {
    const Dataset ds = read_data(c, data_path);
    const auto base = crystal_eval_frames(c, ds);
    works = crystal_works(*stack, base, cfg.base_temperature, cfg.target_temperature);
    j["target"] = "toy crystal from T0 = " + format_double(cfg.base_temperature) + " to T = " +
                  format_double(cfg.target_temperature);
    j["inputs"] = {{"data", file_digest(data_path)}, {"model", file_digest(model_path)}};
  }
  auto est = [&](const std::vector<std::size_t>& idx) { return lfep_estimate(pick(works, idx)).delta_f; };
  const auto bs = bootstrap(est, {works.size()}, cfg.bootstrap, cfg.stage_seed(kStageEstimate) + 1);
  FreeEnergyEstimate e;
  e.method = "lfep";
  e.delta_f = est(all_indices(works.size()));
  e.sigma = bs.sigma;
  e.resamples = cfg.bootstrap;
  e.per_molecule = stack->is_crystal();
  e.counts = {works.size()};
  std::vector<double> log_w(works.size());
  for (std::size_t i = 0; i < works.size(); ++i) log_w[i] = -works[i];
  const double ess = kish_ess(log_w);
  j.update(estimate_json(e, double(cfg.crystal.n)));
  j["mean_work"] = lfep_estimate(works).mean_work;
  j["kish_ess"] = ess;
  j["kish_ess_percent"] = 100.0 * ess / double(works.size());
  write_file(c.path("estimate.json"), dump(j));
  c.say() << "lfep delta_f " << e.delta_f << " +- " << 2.0 * e.sigma << " (2 sigma), kish ess "
          << 100.0 * ess / double(works.size()) << "%\n";
}

void cmd_mbar(const Context& c) {
  require_crystal(c, "mbar");
  const RunConfig& cfg = c.cfg;
  const auto temps = geometric_ladder(cfg.base_temperature, cfg.target_temperature, cfg.ladder_rungs);
  const ToyCrystal model(cfg.crystal);
  std::vector<double> energy;
  std::vector<int> counts;
  std::vector<std::size_t> blocks;
  json inputs = json::object();
  for (int k = 0; k < cfg.ladder_rungs; ++k) {
    const std::string path = c.path(ladder_file(k));
    const Dataset ds = read_data(c, path);
    if (std::abs(ds.meta.temperature - temps[k]) > 1e-12 * temps[k])
      throw ValidationError(path + " was sampled at T = " + format_double(ds.meta.temperature) + ", expected " +
                            format_double(temps[k]));
    for (const auto& f : ds.frames) energy.push_back(crystal_energy(f, model));
    counts.push_back(static_cast<int>(ds.frames.size()));
    blocks.push_back(ds.frames.size());
    inputs[ladder_file(k)] = file_digest(path);
  }
  const std::size_t kk = temps.size();
  auto reduced = [&](const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd u(kk, idx.size());
    for (std::size_t n = 0; n < idx.size(); ++n)
      for (std::size_t k = 0; k < kk; ++k) u(k, n) = energy[idx[n]] / temps[k];
    return u;
  };
  int iterations = 0;
  const Eigen::VectorXd f = mbar_solve(reduced(all_indices(energy.size())), counts, cfg.mbar, &iterations);
  auto est = [&](const std::vector<std::size_t>& idx) {
    const Eigen::VectorXd g = mbar_solve(reduced(idx), counts, cfg.mbar);
    return g[kk - 1] - g[0];
  };
  const auto bs = bootstrap(est, blocks, cfg.bootstrap, cfg.stage_seed(kStageMbar));
  FreeEnergyEstimate e;
  e.method = "mbar";
  e.delta_f = f[kk - 1] - f[0];
  e.sigma = bs.sigma;
  e.resamples = cfg.bootstrap;
  e.per_molecule = true;
  e.counts = blocks;
  json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["temperatures"] = temps;
  j["reduced_free_energies"] = std::vector<double>(f.data(), f.data() + f.size());
  j["iterations"] = iterations;
  j.update(estimate_json(e, double(cfg.crystal.n)));
  j["inputs"] = inputs;
  write_file(c.path("mbar.json"), dump(j));
  c.say() << "mbar delta_f " << e.delta_f << " +- " << 2.0 * e.sigma << " (2 sigma), " << iterations
          << " iterations\n";
}

bool cmd_check(const Context& c, bool write_report) {
  int failed = 0, total = 0;
  const auto results = run_checks(c.cfg.seed, [&](const CheckResult& r) {
    ++total;
    if (!r.passed) ++failed;
    c.say() << format_checks({r}) << std::flush;
  });
  c.say() << total - failed << " of " << total << " checks passed\n";
  if (write_report) write_file(c.path("check_report.txt"), format_checks(results));
  return failed == 0;
}

void cmd_hist(const Context& c, const std::string& input) {
  const Dataset ds = dataset_read(input);
  const std::string stem = fs::path(input).stem().string();
  for (const auto& h : hist_emit(ds, c.cfg.hist_pairs, c.cfg.hist_bins)) {
    const std::string name = stem + "_" + hist_file_name(h.pair);
    write_file(c.path(name), h.csv());
    c.say() << name << ": " << h.total() << " counts\n";
  }
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rigid-body normalizing flows: data, training, sampling and free energies", "rbflow"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run configuration (defaults when omitted)");
  CLI::Option* seed_opt = app.add_option("--seed", seed, "Overrides the configured seed");
  CLI::Option* out_opt = app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_flag("--quiet", quiet, "Suppress progress output");

  std::string data_path, model_path, input_path;
  int count = 0;
  auto* gen = app.add_subcommand("gen-data", "Metropolis sampling of the target (and the crystal ladder)");
  auto* train = app.add_subcommand("train", "Train a flow on data.txt");
  train->add_option("--data", data_path, "Dataset (default <out>/data.txt)");
  auto* sample = app.add_subcommand("sample", "Draw flow samples with their log densities");
  sample->add_option("--model", model_path, "Model (default <out>/model.json)");
  sample->add_option("--data", data_path, "Crystal base data (default <out>/data.txt)");
  CLI::Option* count_opt = sample->add_option("--count", count, "Number of samples (tetra)")->check(CLI::PositiveNumber);
  auto* estimate = app.add_subcommand("estimate", "LFEP free energy, bootstrap error and Kish ESS");
  estimate->add_option("--model", model_path, "Model (default <out>/model.json)");
  estimate->add_option("--data", data_path, "Crystal base data (default <out>/data.txt)");
  auto* mbar = app.add_subcommand("mbar", "MBAR over the crystal temperature ladder");
  auto* check = app.add_subcommand("check", "Run the invariant suite");
  auto* hist = app.add_subcommand("hist", "Quaternion component histograms as CSV");
  hist->add_option("--input", input_path, "Dataset (default <out>/data.txt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return ok;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << "\n" << app.help();
    return usage;
  }

  try {
    Context c;
    c.cfg = config_path.empty() ? default_config("tetra") : config_read(config_path);
    if (seed_opt->count() > 0) c.cfg.seed = seed;
    c.out = out_dir;
    c.quiet = quiet;
    c.log = &out;
    auto in_out = [&](const std::string& given, const char* name) {
      return given.empty() ? c.path(name) : given;
    };

    const bool writes = !check->parsed() || out_opt->count() > 0;
    if (writes) {
      fs::create_directories(c.out);
      write_file(c.path("run_config.json"), config_to_json(c.cfg));
    }

    if (gen->parsed()) {
      cmd_gen_data(c);
    } else if (train->parsed()) {
      cmd_train(c, in_out(data_path, "data.txt"));
    } else if (sample->parsed()) {
      cmd_sample(c, in_out(model_path, "model.json"), in_out(data_path, "data.txt"),
                 count_opt->count() > 0 ? count : c.cfg.sample_count);
    } else if (estimate->parsed()) {
      cmd_estimate(c, in_out(model_path, "model.json"), in_out(data_path, "data.txt"));
    } else if (mbar->parsed()) {
      cmd_mbar(c);
    } else if (check->parsed()) {
      if (!cmd_check(c, writes)) {
        err << "check: invariant failures\n";
        return numerical;
      }
    } else if (hist->parsed()) {
      cmd_hist(c, in_out(input_path, "data.txt"));
    }
    return ok;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << " (residual " << e.residual() << ")\n";
    return numerical;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return validation;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return validation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return validation;
  }
}

}  // namespace rbflow::cli
