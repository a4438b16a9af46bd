#include "rbflow/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rbflow/errors.hpp"

namespace rbflow {

using nlohmann::json;

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["experiment"] = c.experiment;
  j["seed"] = c.seed;
  j["tetra"] = {{"field", {{"c", {c.field.c.x(), c.field.c.y(), c.field.c.z()}}, {"C", c.field.C}}},
                {"temperature", c.tetra_temperature}};
  const CrystalParams& p = c.crystal;
  j["crystal"] = {{"n", p.n},
                  {"spacing", p.spacing},
                  {"k_t", p.k_t},
                  {"epsilon", p.epsilon},
                  {"sigma", p.sigma},
                  {"delta", p.delta},
                  {"r_cut", p.r_cut},
                  {"charges", p.charges},
                  {"bond", p.bond},
                  {"angle_deg", p.angle_deg},
                  {"base_temperature", c.base_temperature},
                  {"target_temperature", c.target_temperature},
                  {"ladder_rungs", c.ladder_rungs}};
  const McmcConfig& s = c.sampler;
  j["sampler"] = {{"step_translation", s.step_translation}, {"step_rotation", s.step_rotation},
                  {"sweeps_per_frame", s.sweeps_per_frame}, {"n_frames", s.n_frames},
                  {"burn_in_frames", s.burn_in_frames}};
  const TetraFlowConfig& t = c.arch.tetra;
  const CrystalFlowConfig& x = c.arch.crystal;
  j["flow"] = {{"tetra",
                {{"rotation", t.rotation.str()},
                 {"reps", t.reps},
                 {"width", t.width},
                 {"embed", t.embed},
                 {"kappa", t.kappa},
                 {"aux_dim", t.aux_dim},
                 {"even_bias", t.even_bias},
                 {"head_scale", t.head_scale}}},
               {"crystal",
                {{"reps", x.reps},
                 {"channels", x.channels},
                 {"heads", x.heads},
                 {"rot_heads", x.rot_heads},
                 {"blocks", x.blocks},
                 {"embed", x.embed},
                 {"gate_init", x.gate_init},
                 {"fixed", x.fixed},
                 {"even_bias", x.even_bias}}}};
  const TrainConfig& r = c.train;
  j["train"] = {{"loss", r.loss},
                {"schedule", r.schedule},
                {"batch", r.batch},
                {"epochs", r.epochs},
                {"steps_per_epoch", r.steps_per_epoch},
                {"lr", r.lr},
                {"lr_end", r.lr_end},
                {"beta1", r.adam.beta1},
                {"beta2", r.adam.beta2},
                {"eps", r.adam.eps},
                {"eval_fraction", r.eval_fraction}};
  j["sample"] = {{"count", c.sample_count}};
  j["estimator"] = {{"bootstrap", c.bootstrap}, {"mbar_tol", c.mbar.tol}, {"mbar_max_iter", c.mbar.max_iter}};
  json pairs = json::array();
  for (const auto& pr : c.hist_pairs) pairs.push_back({pr[0], pr[1]});
  j["hist"] = {{"bins", c.hist_bins}, {"pairs", pairs}};
  return j;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ValidationError("config: '" + path + "' " + what);
}

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Checks that every key of `user` exists in `schema` with a compatible type
// and overwrites the schema value.
void merge(json& schema, const json& user, const std::string& path) {
  if (!user.is_object()) fail(path.empty() ? "<root>" : path, "must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = join(path, it.key());
    if (!schema.contains(it.key())) fail(key, "is not a known key");
    json& slot = schema[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      merge(slot, v, key);
    } else if (slot.is_string()) {
      if (!v.is_string()) fail(key, "must be a string");
      slot = v;
    } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
      if (!v.is_number_integer()) fail(key, "must be an integer");
      slot = v;
    } else if (slot.is_number()) {
      if (!v.is_number()) fail(key, "must be a number");
      slot = v.get<double>();
    } else if (slot.is_array()) {
      if (!v.is_array()) fail(key, "must be an array");
      slot = v;
    } else if (slot.is_boolean()) {
      if (!v.is_boolean()) fail(key, "must be true or false");
      slot = v;
    }
  }
}

template <class T>
T get(const json& j, const std::string& path) {
  const json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    cur = &cur->at(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return cur->get<T>();
  } catch (const json::exception&) {
    fail(path, "has the wrong type");
  }
}

template <class F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    fail(path, std::string("is invalid: ") + e.what());
  }
}

RunConfig from_json(const json& j) {
  RunConfig c;
  c.experiment = get<std::string>(j, "experiment");
  c.seed = get<std::uint64_t>(j, "seed");

  const auto cv = get<std::vector<double>>(j, "tetra.field.c");
  if (cv.size() != 3) fail("tetra.field.c", "must hold 3 numbers");
  c.field.c = Vec3(cv[0], cv[1], cv[2]);
  c.field.C = get<double>(j, "tetra.field.C");
  checked("tetra.field", [&] { c.field.validate(); });
  c.tetra_temperature = get<double>(j, "tetra.temperature");
  if (!(c.tetra_temperature > 0.0)) fail("tetra.temperature", "must be positive");

  CrystalParams& p = c.crystal;
  p.n = get<int>(j, "crystal.n");
  p.spacing = get<double>(j, "crystal.spacing");
  p.k_t = get<double>(j, "crystal.k_t");
  p.epsilon = get<double>(j, "crystal.epsilon");
  p.sigma = get<double>(j, "crystal.sigma");
  p.delta = get<double>(j, "crystal.delta");
  p.r_cut = get<double>(j, "crystal.r_cut");
  p.charges = get<std::vector<double>>(j, "crystal.charges");
  p.bond = get<double>(j, "crystal.bond");
  p.angle_deg = get<double>(j, "crystal.angle_deg");
  checked("crystal", [&] { ToyCrystal check(p); });
  c.base_temperature = get<double>(j, "crystal.base_temperature");
  c.target_temperature = get<double>(j, "crystal.target_temperature");
  c.ladder_rungs = get<int>(j, "crystal.ladder_rungs");
  if (!(c.base_temperature > 0.0)) fail("crystal.base_temperature", "must be positive");
  if (!(c.target_temperature > 0.0)) fail("crystal.target_temperature", "must be positive");
  if (c.ladder_rungs < 2) fail("crystal.ladder_rungs", "must be at least 2");

  McmcConfig& s = c.sampler;
  s.step_translation = get<double>(j, "sampler.step_translation");
  s.step_rotation = get<double>(j, "sampler.step_rotation");
  s.sweeps_per_frame = get<int>(j, "sampler.sweeps_per_frame");
  s.n_frames = get<int>(j, "sampler.n_frames");
  s.burn_in_frames = get<int>(j, "sampler.burn_in_frames");
  checked("sampler", [&] { s.validate(); });

  FlowArchitecture& a = c.arch;
  a.experiment = c.experiment;
  checked("flow.tetra.rotation",
          [&] { a.tetra.rotation = RotationSpec::parse(get<std::string>(j, "flow.tetra.rotation")); });
  a.tetra.reps = get<int>(j, "flow.tetra.reps");
  a.tetra.width = get<int>(j, "flow.tetra.width");
  a.tetra.embed = get<int>(j, "flow.tetra.embed");
  a.tetra.kappa = get<double>(j, "flow.tetra.kappa");
  a.tetra.aux_dim = get<int>(j, "flow.tetra.aux_dim");
  a.tetra.even_bias = get<double>(j, "flow.tetra.even_bias");
  a.tetra.head_scale = get<double>(j, "flow.tetra.head_scale");
  if (a.tetra.reps < 0) fail("flow.tetra.reps", "must be non-negative");
  if (a.tetra.width < 1) fail("flow.tetra.width", "must be positive");
  if (a.tetra.embed < 1) fail("flow.tetra.embed", "must be positive");
  if (!(a.tetra.kappa >= 0.0)) fail("flow.tetra.kappa", "must be non-negative");
  if (a.tetra.aux_dim < 1) fail("flow.tetra.aux_dim", "must be positive");
  if (!(a.tetra.even_bias >= 0.0)) fail("flow.tetra.even_bias", "must be non-negative");
  if (!(a.tetra.head_scale >= 0.0)) fail("flow.tetra.head_scale", "must be non-negative");
  a.crystal.reps = get<int>(j, "flow.crystal.reps");
  a.crystal.channels = get<int>(j, "flow.crystal.channels");
  a.crystal.heads = get<int>(j, "flow.crystal.heads");
  a.crystal.rot_heads = get<int>(j, "flow.crystal.rot_heads");
  a.crystal.blocks = get<int>(j, "flow.crystal.blocks");
  a.crystal.embed = get<int>(j, "flow.crystal.embed");
  a.crystal.gate_init = get<double>(j, "flow.crystal.gate_init");
  a.crystal.fixed = get<int>(j, "flow.crystal.fixed");
  a.crystal.even_bias = get<double>(j, "flow.crystal.even_bias");
  a.crystal.temperature0 = c.base_temperature;
  a.crystal_params = p;
  if (a.crystal.reps < 0) fail("flow.crystal.reps", "must be non-negative");
  if (a.crystal.channels < 1) fail("flow.crystal.channels", "must be positive");
  if (a.crystal.heads < 1 || a.crystal.channels % a.crystal.heads != 0)
    fail("flow.crystal.heads", "must divide flow.crystal.channels");
  if (a.crystal.rot_heads < 0 || a.crystal.rot_heads > a.crystal.heads)
    fail("flow.crystal.rot_heads", "must lie in [0, heads]");
  if (a.crystal.blocks < 1) fail("flow.crystal.blocks", "must be positive");
  if (a.crystal.embed < 1) fail("flow.crystal.embed", "must be positive");
  if (a.crystal.fixed < 0 || a.crystal.fixed >= p.n) fail("flow.crystal.fixed", "must index a molecule");
  if (!(a.crystal.even_bias >= 0.0)) fail("flow.crystal.even_bias", "must be non-negative");

  TrainConfig& t = c.train;
  t.loss = get<std::string>(j, "train.loss");
  t.schedule = get<std::string>(j, "train.schedule");
  t.batch = get<int>(j, "train.batch");
  t.epochs = get<int>(j, "train.epochs");
  t.steps_per_epoch = get<int>(j, "train.steps_per_epoch");
  t.lr = get<double>(j, "train.lr");
  t.lr_end = get<double>(j, "train.lr_end");
  t.adam.beta1 = get<double>(j, "train.beta1");
  t.adam.beta2 = get<double>(j, "train.beta2");
  t.adam.eps = get<double>(j, "train.eps");
  t.eval_fraction = get<double>(j, "train.eval_fraction");
  t.target_temperature = c.target_temperature;
  checked("train", [&] { t.validate(); });
  if (c.experiment == "tetra" && t.loss != "nll") fail("train.loss", "must be nll for the tetra experiment");
  if (c.experiment == "crystal" && t.loss != "rkl") fail("train.loss", "must be rkl for the crystal experiment");

  c.sample_count = get<int>(j, "sample.count");
  if (c.sample_count < 1) fail("sample.count", "must be positive");
  c.bootstrap = get<int>(j, "estimator.bootstrap");
  if (c.bootstrap < 2) fail("estimator.bootstrap", "must be at least 2");
  c.mbar.tol = get<double>(j, "estimator.mbar_tol");
  c.mbar.max_iter = get<int>(j, "estimator.mbar_max_iter");
  if (!(c.mbar.tol > 0.0)) fail("estimator.mbar_tol", "must be positive");
  if (c.mbar.max_iter < 1) fail("estimator.mbar_max_iter", "must be positive");

  c.hist_bins = get<int>(j, "hist.bins");
  if (c.hist_bins < 8) fail("hist.bins", "must be at least 8");
  const json& pairs = j.at("hist").at("pairs");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string key = "hist.pairs[" + std::to_string(i) + "]";
    std::vector<int> pr;
    try {
      pr = pairs[i].get<std::vector<int>>();
    } catch (const json::exception&) {
      fail(key, "must be a pair of component indices");
    }
    if (pr.size() != 2 || pr[0] < 0 || pr[0] > 3 || pr[1] < 0 || pr[1] > 3 || pr[0] == pr[1])
      fail(key, "must be two distinct indices in 0..3");
    c.hist_pairs.push_back({pr[0], pr[1]});
  }
  if (c.hist_pairs.empty()) fail("hist.pairs", "must not be empty");
  return c;
}

}  // namespace

RunConfig default_config(const std::string& experiment) {
  RunConfig c;
  if (experiment != "tetra" && experiment != "crystal")
    fail("experiment", "must be \"tetra\" or \"crystal\"");
  c.experiment = experiment;
  c.arch.experiment = experiment;
  if (experiment == "tetra") {
    c.sampler.step_rotation = 0.15;
    c.sampler.n_frames = 10000;
    c.train = TrainConfig::tetra_defaults();
  } else {
    c.sampler.n_frames = 10000;
    c.train = TrainConfig::crystal_defaults();
  }
  c.arch.crystal.temperature0 = c.base_temperature;
  c.arch.crystal_params = c.crystal;
  c.train.target_temperature = c.target_temperature;
  c.hist_pairs = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
  return c;
}

std::string default_config_json(const std::string& experiment) {
  return to_json(default_config(experiment)).dump(2) + "\n";
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig config_from_json(const std::string& text) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!user.is_object()) fail("<root>", "must be an object");
  if (user.contains("schema_version")) {
    if (!user["schema_version"].is_number_integer() || user["schema_version"].get<int>() != kConfigSchemaVersion)
      fail("schema_version", "must be " + std::to_string(kConfigSchemaVersion));
  }
  std::string experiment = "tetra";
  if (user.contains("experiment")) {
    if (!user["experiment"].is_string()) fail("experiment", "must be a string");
    experiment = user["experiment"].get<std::string>();
  }
  json schema = to_json(default_config(experiment));
  merge(schema, user, "");
  return from_json(schema);
}

RunConfig config_read(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace rbflow
