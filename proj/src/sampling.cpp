#include "rbflow/sampling.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rbflow/errors.hpp"

namespace rbflow {

using nlohmann::json;

void McmcConfig::validate() const {
  if (!(step_translation > 0.0)) throw ValidationError("translation step must be positive");
  if (!(step_rotation > 0.0)) throw ValidationError("rotation step must be positive");
  if (sweeps_per_frame < 1) throw ValidationError("sweeps per frame must be at least 1");
  if (n_frames < 1) throw ValidationError("frame count must be at least 1");
}

TetraTarget::TetraTarget(TetraField field, BodyTemplate body, double temperature)
    : field_(field), body_(std::move(body)), temperature_(temperature) {
  field_.validate();
  if (!(temperature_ > 0.0)) throw ValidationError("temperature must be positive");
}

double TetraTarget::delta_u(const PoseSet& state, int i, const RigidPose& proposal) const {
  return (tetra_energy(proposal.q, body_, field_) - tetra_energy(state.poses[i].q, body_, field_)) /
         temperature_;
}

double TetraTarget::u(const PoseSet& state) const {
  return tetra_energy(state.poses[0].q, body_, field_) / temperature_;
}

CrystalTarget::CrystalTarget(const ToyCrystal& model, double temperature, int fixed)
    : model_(model), temperature_(temperature), fixed_(fixed) {
  if (!(temperature_ > 0.0)) throw ValidationError("temperature must be positive");
  if (fixed < -1 || fixed >= model.size()) throw ValidationError("fixed molecule index out of range");
}

double CrystalTarget::delta_u(const PoseSet& state, int i, const RigidPose& proposal) const {
  return crystal_energy_delta(state, i, proposal, model_) / temperature_;
}

double CrystalTarget::u(const PoseSet& state) const {
  return crystal_energy(state, model_) / temperature_;
}

Dataset mcmc_run(const McmcTarget& target, const PoseSet& start, const McmcConfig& cfg,
                 McmcStats* stats) {
  cfg.validate();
  const int n = target.size();
  if (static_cast<int>(start.poses.size()) != n)
    throw ValidationError("start configuration does not match the target size");
  Rng rng(cfg.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  PoseSet state = start;
  McmcStats st;
  Dataset ds;
  ds.meta.n_bodies = n;
  ds.meta.body = start.body;
  ds.meta.seed = cfg.seed;
  ds.meta.generator = cfg;
  ds.frames.reserve(cfg.n_frames);

  const int total = cfg.burn_in() + cfg.n_frames;
  for (int frame = 0; frame < total; ++frame) {
    for (long long step = 0; step < static_cast<long long>(cfg.sweeps_per_frame) * n; ++step) {
      const int i = pick(rng);
      RigidPose prop = state.poses[i];
      if (target.translates(i)) {
        for (int d = 0; d < 3; ++d) prop.x0[d] += cfg.step_translation * standard_normal(rng);
      }
      Vec4 q = prop.q.coeffs();
      for (int d = 0; d < 4; ++d) q[d] += cfg.step_rotation * standard_normal(rng);
      prop.q = UnitQuaternion(q);
      const double du = target.delta_u(state, i, prop);
      ++st.proposed;
      if (du <= 0.0 || uniform01(rng) < std::exp(-du)) {
        state.poses[i] = prop;
        ++st.accepted;
      }
    }
    if (frame >= cfg.burn_in()) ds.frames.push_back(state);
  }
  ds.meta.acceptance = st.acceptance();
  if (stats != nullptr) *stats = st;
  return ds;
}

bool operator==(const Dataset& a, const Dataset& b) {
  return dataset_to_string(a) == dataset_to_string(b);
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

constexpr int kDatasetVersion = 1;

json generator_json(const McmcConfig& c) {
  return {{"step_translation", c.step_translation}, {"step_rotation", c.step_rotation},
          {"sweeps_per_frame", c.sweeps_per_frame}, {"n_frames", c.n_frames},
          {"burn_in_frames", c.burn_in_frames},     {"seed", c.seed}};
}

[[noreturn]] void header_error(const std::string& what) {
  throw FormatError(FormatError::Kind::header, "dataset header: " + what);
}

template <class T>
T header_field(const json& j, const char* key) {
  if (!j.contains(key)) header_error(std::string("missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    header_error(std::string("bad value for '") + key + "'");
  }
}

}  // namespace

std::string dataset_to_string(const Dataset& ds) {
  json h;
  h["format"] = "rbflow-dataset";
  h["version"] = kDatasetVersion;
  h["kind"] = ds.meta.kind;
  h["n_bodies"] = ds.meta.n_bodies;
  h["temperature"] = ds.meta.temperature;
  h["seed"] = ds.meta.seed;
  h["acceptance"] = ds.meta.acceptance;
  json tpl = json::array();
  for (const auto& b : ds.meta.body.beads()) tpl.push_back({b.x(), b.y(), b.z()});
  h["template"] = tpl;
  h["generator"] = generator_json(ds.meta.generator);
  h["count"] = ds.frames.size();

  std::string out = h.dump() + "\n";
  for (const auto& f : ds.frames) {
    std::string line;
    for (std::size_t k = 0; k < f.poses.size(); ++k) {
      const auto& p = f.poses[k];
      const double v[7] = {p.x0.x(), p.x0.y(), p.x0.z(), p.q.x(), p.q.y(), p.q.z(), p.q.w()};
      for (int j = 0; j < 7; ++j) {
        if (!line.empty()) line += ' ';
        line += format_double(v[j]);
      }
    }
    out += line;
    out += '\n';
  }
  return out;
}

Dataset dataset_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) header_error("empty file");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception&) {
    header_error("not a JSON object");
  }
  if (!h.is_object() || h.value("format", "") != "rbflow-dataset") header_error("not an rbflow dataset");
  if (header_field<int>(h, "version") != kDatasetVersion)
    throw FormatError(FormatError::Kind::version,
                      "dataset version " + std::to_string(header_field<int>(h, "version")) +
                          " is not supported");

  Dataset ds;
  ds.meta.kind = header_field<std::string>(h, "kind");
  ds.meta.n_bodies = header_field<int>(h, "n_bodies");
  ds.meta.temperature = header_field<double>(h, "temperature");
  ds.meta.seed = header_field<std::uint64_t>(h, "seed");
  ds.meta.acceptance = header_field<double>(h, "acceptance");
  std::vector<Vec3> beads;
  for (const auto& b : header_field<std::vector<std::vector<double>>>(h, "template")) {
    if (b.size() != 3) header_error("template beads need 3 coordinates");
    beads.emplace_back(b[0], b[1], b[2]);
  }
  try {
    ds.meta.body = BodyTemplate(beads);
  } catch (const ValidationError& e) {
    header_error(e.what());
  }
  const json g = header_field<json>(h, "generator");
  ds.meta.generator.step_translation = header_field<double>(g, "step_translation");
  ds.meta.generator.step_rotation = header_field<double>(g, "step_rotation");
  ds.meta.generator.sweeps_per_frame = header_field<int>(g, "sweeps_per_frame");
  ds.meta.generator.n_frames = header_field<int>(g, "n_frames");
  ds.meta.generator.burn_in_frames = header_field<int>(g, "burn_in_frames");
  ds.meta.generator.seed = header_field<std::uint64_t>(g, "seed");
  const auto count = header_field<std::size_t>(h, "count");
  if (ds.meta.n_bodies < 1) header_error("n_bodies must be positive");

  const std::size_t width = 7 * static_cast<std::size_t>(ds.meta.n_bodies);
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    v.reserve(width);
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double x;
      const auto res = std::from_chars(p, end, x);
      if (res.ec != std::errc())
        throw FormatError(FormatError::Kind::value, "record " + std::to_string(index) + ": not a number");
      v.push_back(x);
      p = res.ptr;
    }
    if (v.size() != width)
      throw FormatError(FormatError::Kind::length, "record " + std::to_string(index) + ": expected " +
                                                       std::to_string(width) + " values, found " +
                                                       std::to_string(v.size()));
    PoseSet f{ds.meta.body, std::vector<RigidPose>(ds.meta.n_bodies)};
    for (int k = 0; k < ds.meta.n_bodies; ++k) {
      const double* r = v.data() + 7 * k;
      f.poses[k].x0 = Vec3(r[0], r[1], r[2]);
      const Vec4 q(r[3], r[4], r[5], r[6]);
      if (!(std::abs(q.norm() - 1.0) <= 1e-9))
        throw FormatError(FormatError::Kind::quaternion_norm,
                          "record " + std::to_string(index) + ", body " + std::to_string(k) +
                              ": quaternion norm " + format_double(q.norm()) + " is not 1");
      f.poses[k].q = UnitQuaternion::from_unit(q);
    }
    ds.frames.push_back(std::move(f));
    ++index;
  }
  if (ds.frames.size() != count)
    throw FormatError(FormatError::Kind::length, "dataset declares " + std::to_string(count) +
                                                     " records but contains " +
                                                     std::to_string(ds.frames.size()));
  return ds;
}

void dataset_write(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path);
  f << dataset_to_string(ds);
  if (!f) throw ValidationError("failed writing " + path);
}

Dataset dataset_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return dataset_from_string(ss.str());
}

}  // namespace rbflow
