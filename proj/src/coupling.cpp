#include "rbflow/coupling.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <Eigen/LU>

#include "json.hpp"
#include "rbflow/errors.hpp"

namespace rbflow {

using nlohmann::json;

namespace {

// softplus(a + kScaleShift) = 1 at a = 0.
const double kScaleShift = std::log(std::exp(1.0) - 1.0);

// Tolerance of the numerical inverse when it is used to generate samples.
constexpr double kSampleTol = 1e-11;
constexpr int kSampleMaxIter = 200;

constexpr std::size_t kEvalBatch = 2048;

Var zeros(Tape& t, Eigen::Index rows) { return t.constant(Tensor::Zero(rows, 1)); }

// Glues a transformed (B x 3N) block to the untouched translation of one body.
Var splice_fixed(const Var& original, const Var& updated, int fixed) {
  if (fixed < 0) return updated;
  const Eigen::Index cols = updated.cols();
  std::vector<Var> parts;
  if (fixed > 0) parts.push_back(slice_cols(updated, 0, 3 * fixed));
  parts.push_back(slice_cols(original, 3 * fixed, 3));
  if (3 * fixed + 3 < cols) parts.push_back(slice_cols(updated, 3 * fixed + 3, cols - 3 * fixed - 3));
  return parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
}

// ---------------------------------------------------------------------------
// Rotation transforms on (R x 4) rows with per-row raw parameters.

ad_maps::Potential potential_from_raw(const Var& raw, int h) {
  return ad_maps::Potential{slice_cols(raw, 0, 4 * h), softplus(slice_cols(raw, 4 * h, h)),
                            softplus(slice_cols(raw, 5 * h, h)), softplus(slice_cols(raw, 6 * h, 1)),
                            h};
}

ConvexPotentialParams potential_row(const Tensor& raw, Eigen::Index r, int h) {
  ConvexPotentialParams p;
  p.W.resize(h, 4);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < 4; ++j) p.W(i, j) = raw(r, 4 * i + j);
  p.u_raw = raw.row(r).segment(4 * h, h).transpose();
  p.b_raw = raw.row(r).segment(5 * h, h).transpose();
  p.c_raw = raw(r, 6 * h);
  return p;
}

void require_no_gradients(const Tape& t, const char* what) {
  if (t.recording()) {
    throw std::logic_error(std::string(what) +
                           " runs numerically; gradients through it are not supported");
  }
}

/// The analytic map Phi.
std::pair<Var, Var> rotation_phi(const RotationSpec& spec, const Var& p, const Var& raw) {
  switch (spec.kind) {
    case RotationSpec::Kind::moebius:
      return ad_maps::moebius_forward(p, ball_squash(raw, kMoebiusRadius));
    case RotationSpec::Kind::cg:
      return ad_maps::cg_forward(p, potential_from_raw(raw, spec.hidden));
    case RotationSpec::Kind::affine:
      break;
  }
  throw std::logic_error("affine rotations are handled by their own layer");
}

/// Phi^{-1}; closed form for Moebius, numerical for the convex gradient map.
std::pair<Var, Var> rotation_phi_inv(const RotationSpec& spec, const Var& p, const Var& raw) {
  if (spec.kind == RotationSpec::Kind::moebius)
    return ad_maps::moebius_inverse(p, ball_squash(raw, kMoebiusRadius));
  if (spec.kind != RotationSpec::Kind::cg) throw std::logic_error("unexpected rotation kind");
  Tape& t = *p.tape();
  require_no_gradients(t, "the convex gradient map inverse");
  const Tensor& pv = p.value();
  const Tensor& rv = raw.value();
  Tensor out(pv.rows(), 4), ld(pv.rows(), 1);
  for (Eigen::Index r = 0; r < pv.rows(); ++r) {
    const ConvexPotentialParams params = potential_row(rv, rv.rows() == 1 ? 0 : r, spec.hidden);
    const Vec4 target = pv.row(r).transpose();
    const Vec4 x = cg_inverse(target, params, kSampleTol, kSampleMaxIter);
    out.row(r) = x.transpose();
    ld(r, 0) = -cg_forward(x, params).logdet;
  }
  return {t.constant(out), t.constant(ld)};
}

// U(-scale/sqrt(in), scale/sqrt(in)) weights for a head that would otherwise
// start at zero.
void random_weights(const Parameter* w, double scale, Rng& rng) {
  if (scale <= 0.0) return;
  auto& m = const_cast<Parameter*>(w)->value;
  std::uniform_real_distribution<double> u(-scale / std::sqrt(double(m.rows())),
                                           scale / std::sqrt(double(m.rows())));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
}

void random_bias(const Parameter* bias, int start, int count, double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  auto& b = const_cast<Parameter*>(bias)->value;
  for (int j = start; j < start + count; ++j) b(0, j) = u(rng);
}

// Columns of the conditioner output that the map depends on only through an
// even function; they get random head biases so gradients do not vanish at
// the identity.
std::pair<int, int> even_block(const RotationSpec& spec) {
  if (spec.kind == RotationSpec::Kind::moebius) return {0, 4};
  if (spec.kind == RotationSpec::Kind::cg) return {0, 4 * spec.hidden};
  return {0, 0};
}

// ---------------------------------------------------------------------------
// Tetrahedron layers

class TetraAuxCoupling : public CouplingLayer {
 public:
  TetraAuxCoupling(nn::ParamStore& store, const std::string& name, const TetraFlowConfig& cfg,
                   Rng& rng)
      : aux_(cfg.aux_dim),
        emb_(nn::FlipEmbedding::make(store, name + ".embed", cfg.embed, rng)),
        mlp_(nn::Mlp::make(store, name + ".mlp", cfg.embed, cfg.width, rng)),
        head_(nn::Dense::make(store, name + ".head", cfg.width, 2 * cfg.aux_dim, rng, nn::Init::zero)) {
    random_weights(head_.w, cfg.head_scale, rng);
  }

  std::string name() const override { return "aux_affine"; }

  LayerResult forward(Tape& t, const FlowState& s) const override {
    const auto [scale, shift] = params(t, s.rot);
    FlowState out = s;
    out.aux = s.aux * scale + shift;
    return {out, row_sum(log(scale))};
  }

  LayerResult inverse(Tape& t, const FlowState& s) const override {
    const auto [scale, shift] = params(t, s.rot);
    FlowState out = s;
    out.aux = (s.aux - shift) / scale;
    return {out, -row_sum(log(scale))};
  }

 private:
  std::pair<Var, Var> params(Tape& t, const Var& rot) const {
    const Var raw = head_(t, mlp_(t, emb_(t, rot)));
    return {softplus(slice_cols(raw, 0, aux_) + kScaleShift), slice_cols(raw, aux_, aux_)};
  }

  int aux_;
  nn::FlipEmbedding emb_;
  nn::Mlp mlp_;
  nn::Dense head_;
};

// Phi runs in the data -> base direction so densities are analytic.
class TetraRotationCoupling : public CouplingLayer {
 public:
  TetraRotationCoupling(nn::ParamStore& store, const std::string& name, const TetraFlowConfig& cfg,
                        Rng& rng)
      : spec_(cfg.rotation),
        mlp_(nn::Mlp::make(store, name + ".mlp", cfg.aux_dim, cfg.width, rng)),
        head_(nn::Dense::make(store, name + ".head", cfg.width, cfg.rotation.param_count(), rng,
                              nn::Init::zero)) {
    random_weights(head_.w, cfg.head_scale, rng);
    const auto [start, count] = even_block(spec_);
    random_bias(head_.b, start, count, cfg.even_bias, rng);
  }

  std::string name() const override { return "rotation_" + spec_.str(); }

  LayerResult forward(Tape& t, const FlowState& s) const override {
    FlowState out = s;
    auto [p, ld] = rotation_phi_inv(spec_, s.rot, head_(t, mlp_(t, s.aux)));
    out.rot = p;
    return {out, ld};
  }

  LayerResult inverse(Tape& t, const FlowState& s) const override {
    FlowState out = s;
    auto [p, ld] = rotation_phi(spec_, s.rot, head_(t, mlp_(t, s.aux)));
    out.rot = p;
    return {out, ld};
  }

 private:
  RotationSpec spec_;
  nn::Mlp mlp_;
  nn::Dense head_;
};

// Unconditioned W = L U with unit-lower L and upper U whose diagonal is exp(s).
class AffineRotationLayer : public CouplingLayer {
 public:
  AffineRotationLayer(nn::ParamStore& store, const std::string& name)
      : lu_(&store.add(name + ".lu", Tensor::Zero(1, 16))) {}

  std::string name() const override { return "rotation_affine"; }

  LayerResult forward(Tape& t, const FlowState& s) const override {
    require_no_gradients(t, "the affine map inverse");
    const auto [W, lad] = matrix(t);
    const Eigen::Matrix4d w = Eigen::Map<const Eigen::Matrix<double, 4, 4, Eigen::RowMajor>>(
        W.value().data());
    const Eigen::Matrix4d winv = w.inverse();
    const Tensor& pv = s.rot.value();
    Tensor out(pv.rows(), 4), ld(pv.rows(), 1);
    for (Eigen::Index r = 0; r < pv.rows(); ++r) {
      const Vec4 y = winv * Vec4(pv.row(r).transpose());
      const Vec4 p = y / y.norm();
      out.row(r) = p.transpose();
      ld(r, 0) = -(lad.value()(0, 0) - 4.0 * std::log((w * p).norm()));
    }
    FlowState o = s;
    o.rot = t.constant(out);
    return {o, t.constant(ld)};
  }

  LayerResult inverse(Tape& t, const FlowState& s) const override {
    const auto [W, lad] = matrix(t);
    FlowState o = s;
    auto [p, ld] = ad_maps::affine_forward(s.rot, W, lad);
    o.rot = p;
    return {o, ld};
  }

 private:
  std::pair<Var, Var> matrix(Tape& t) const {
    // Raw layout: 6 strictly-lower entries of L, 6 strictly-upper entries of
    // U, then the 4 log-diagonal entries of U.
    Tensor sl = Tensor::Zero(16, 16), su = Tensor::Zero(16, 16), place = Tensor::Zero(4, 16);
    Tensor eye = Tensor::Zero(1, 16);
    int k = 0;
    for (int i = 0; i < 4; ++i) {
      eye(0, 5 * i) = 1.0;
      place(i, 5 * i) = 1.0;
      for (int j = 0; j < i; ++j) sl(k++, 4 * i + j) = 1.0;
    }
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) su(k++, 4 * i + j) = 1.0;
    const Var raw = t.param(*lu_);
    const Var s = slice_cols(raw, 12, 4);
    const Var lower = t.constant(eye) + matmul(raw, t.constant(sl));
    const Var upper = matmul(raw, t.constant(su)) + matmul(exp(s), t.constant(place));
    const Var W = bmm(lower, upper, 4, 4, 4);
    return {W, row_sum(s)};
  }

  const Parameter* lu_;
};

// ---------------------------------------------------------------------------
// Crystal layers

Tensor site_row(const ToyCrystal& model) {
  Tensor s(1, 3 * model.size());
  for (int i = 0; i < model.size(); ++i) s.block(0, 3 * i, 1, 3) = model.sites()[i].transpose();
  return s;
}

class CrystalPositionCoupling : public CouplingLayer {
 public:
  CrystalPositionCoupling(nn::ParamStore& store, const std::string& name,
                          const CrystalFlowConfig& cfg, const ToyCrystal& model, Rng& rng)
      : n_(model.size()),
        fixed_(cfg.fixed),
        sites_(site_row(model)),
        emb_(nn::FlipEmbedding::make(store, name + ".embed", cfg.embed, rng)),
        tr_(nn::Transformer::make(store, name + ".tr", model.size() + cfg.embed, cfg.channels,
                                  cfg.heads, cfg.rot_heads, cfg.blocks, rng)),
        head_(nn::Dense::make(store, name + ".head", cfg.channels, 6, rng, nn::Init::zero)),
        gate_(&store.add(name + ".gate", Tensor::Constant(1, 6, cfg.gate_init))) {
    mask_ = Tensor::Ones(1, 3 * n_);
    if (fixed_ >= 0) mask_.block(0, 3 * fixed_, 1, 3).setZero();
  }

  std::string name() const override { return "position_affine"; }

  LayerResult forward(Tape& t, const FlowState& s) const override {
    const auto [scale, shift] = params(t, s.rot);
    const Var sites = t.constant(sites_);
    const Var y = sites + scale * (s.pos - sites) + shift;
    FlowState out = s;
    out.pos = splice_fixed(s.pos, y, fixed_);
    return {out, row_sum(log(scale) * t.constant(mask_))};
  }

  LayerResult inverse(Tape& t, const FlowState& s) const override {
    const auto [scale, shift] = params(t, s.rot);
    const Var sites = t.constant(sites_);
    const Var x = sites + (s.pos - sites - shift) / scale;
    FlowState out = s;
    out.pos = splice_fixed(s.pos, x, fixed_);
    return {out, -row_sum(log(scale) * t.constant(mask_))};
  }

 private:
  std::pair<Var, Var> params(Tape& t, const Var& rot) const {
    const Eigen::Index b = rot.rows();
    const Var q = reshape(rot, b * n_, 4);
    const Var tokens = ad::concat_cols({t.constant(nn::one_hot_tokens(static_cast<int>(b), n_)), emb_(t, q)});
    const Var raw = gated(head_(t, tr_(t, tokens, &q, n_)), t.param(*gate_));
    const Var scale = softplus(slice_cols(raw, 0, 3) + kScaleShift);
    return {reshape(scale, b, 3 * n_), reshape(slice_cols(raw, 3, 3), b, 3 * n_)};
  }

  int n_, fixed_;
  Tensor sites_, mask_;
  nn::FlipEmbedding emb_;
  nn::Transformer tr_;
  nn::Dense head_;
  const Parameter* gate_;
};

class CrystalRotationCoupling : public CouplingLayer {
 public:
  CrystalRotationCoupling(nn::ParamStore& store, const std::string& name,
                          const CrystalFlowConfig& cfg, const ToyCrystal& model, Rng& rng)
      : n_(model.size()),
        sites_(site_row(model)),
        tr_(nn::Transformer::make(store, name + ".tr", model.size() + 3, cfg.channels, cfg.heads, 0,
                                  cfg.blocks, rng)),
        head_(nn::Dense::make(store, name + ".head", cfg.channels, 4, rng, nn::Init::zero)),
        gate_(&store.add(name + ".gate", Tensor::Constant(1, 4, cfg.gate_init))) {
    random_bias(head_.b, 0, 4, cfg.even_bias, rng);
  }

  std::string name() const override { return "rotation_moebius"; }

  LayerResult forward(Tape& t, const FlowState& s) const override {
    const Var omega = ball_squash(params(t, s.pos), kMoebiusRadius);
    return apply(s, ad_maps::moebius_forward(reshape(s.rot, s.rot.rows() * n_, 4), omega));
  }

  LayerResult inverse(Tape& t, const FlowState& s) const override {
    const Var omega = ball_squash(params(t, s.pos), kMoebiusRadius);
    return apply(s, ad_maps::moebius_inverse(reshape(s.rot, s.rot.rows() * n_, 4), omega));
  }

 private:
  Var params(Tape& t, const Var& pos) const {
    const Eigen::Index b = pos.rows();
    const Var rel = reshape(pos - t.constant(sites_), b * n_, 3);
    const Var tokens = ad::concat_cols({t.constant(nn::one_hot_tokens(static_cast<int>(b), n_)), rel});
    return gated(head_(t, tr_(t, tokens, nullptr, n_)), t.param(*gate_));
  }

  LayerResult apply(const FlowState& s, const std::pair<Var, Var>& r) const {
    const Eigen::Index b = s.rot.rows();
    FlowState out = s;
    out.rot = reshape(r.first, b, 4 * n_);
    return {out, row_sum(reshape(r.second, b, n_))};
  }

  int n_;
  Tensor sites_;
  nn::Transformer tr_;
  nn::Dense head_;
  const Parameter* gate_;
};

}  // namespace

// ---------------------------------------------------------------------------

RotationSpec RotationSpec::parse(const std::string& s) {
  RotationSpec r;
  if (s == "moebius") {
    r.kind = Kind::moebius;
  } else if (s == "affine") {
    r.kind = Kind::affine;
  } else if (s.size() > 2 && s.compare(0, 2, "cg") == 0) {
    r.kind = Kind::cg;
    std::size_t used = 0;
    int h = 0;
    try {
      h = std::stoi(s.substr(2), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() - 2 || h < 1) throw ValidationError("bad convex potential width in '" + s + "'");
    r.hidden = h;
  } else {
    throw ValidationError("unknown rotation layer kind '" + s + "' (moebius | affine | cgH)");
  }
  return r;
}

std::string RotationSpec::str() const {
  switch (kind) {
    case Kind::moebius:
      return "moebius";
    case Kind::affine:
      return "affine";
    case Kind::cg:
      return "cg" + std::to_string(hidden);
  }
  return "?";
}

int RotationSpec::param_count() const {
  switch (kind) {
    case Kind::moebius:
      return 4;
    case Kind::affine:
      return 0;
    case Kind::cg:
      return 6 * hidden + 1;
  }
  return 0;
}

double gated_init(double raw, double gate) { return raw / (1.0 + std::exp(-gate)); }

Var gated(const Var& raw, const Var& gate) { return raw * sigmoid(gate); }

// ---------------------------------------------------------------------------

bool FlowStack::analytic_sampling() const {
  if (is_crystal()) return true;
  return arch.tetra.rotation.kind == RotationSpec::Kind::moebius;
}

LayerResult FlowStack::push_forward(Tape& t, const FlowState& base) const {
  const Eigen::Index b = base.rot.rows();
  LayerResult acc{base, zeros(t, b)};
  for (const auto& layer : layers) {
    LayerResult r = layer->forward(t, acc.state);
    acc.state = r.state;
    acc.logdet = acc.logdet + r.logdet;
  }
  return acc;
}

LayerResult FlowStack::pull_back(Tape& t, const FlowState& data) const {
  const Eigen::Index b = data.rot.rows();
  LayerResult acc{data, zeros(t, b)};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    LayerResult r = (*it)->inverse(t, acc.state);
    acc.state = r.state;
    acc.logdet = acc.logdet + r.logdet;
  }
  return acc;
}

Var FlowStack::base_log_prob(Tape& t, const FlowState& base) const {
  if (is_crystal()) {
    return crystal_energy_tape(base.pos, base.rot, *crystal) * (-1.0 / arch.crystal.temperature0);
  }
  SymVMFParams vmf;
  vmf.kappa = arch.tetra.kappa;
  Var lp = ad_maps::svmf_logpdf(base.rot, vmf);
  if (aux_dim > 0) {
    lp = lp + row_sum(square(base.aux)) * -0.5 - 0.5 * aux_dim * std::log(2.0 * M_PI);
  }
  (void)t;
  return lp;
}

Var FlowStack::log_density(Tape& t, const FlowState& data) const {
  const LayerResult r = pull_back(t, data);
  return base_log_prob(t, r.state) + r.logdet;
}

// ---------------------------------------------------------------------------

std::unique_ptr<FlowStack> build_tetra_flow(const TetraFlowConfig& cfg, std::uint64_t seed) {
  FlowArchitecture arch;
  arch.experiment = "tetra";
  arch.tetra = cfg;
  arch.seed = seed;
  return build_flow(arch);
}

std::unique_ptr<FlowStack> build_crystal_flow(const CrystalFlowConfig& cfg,
                                              const CrystalParams& crystal, std::uint64_t seed) {
  FlowArchitecture arch;
  arch.experiment = "crystal";
  arch.crystal = cfg;
  arch.crystal_params = crystal;
  arch.seed = seed;
  return build_flow(arch);
}

std::unique_ptr<FlowStack> build_flow(const FlowArchitecture& arch) {
  auto stack = std::make_unique<FlowStack>();
  stack->arch = arch;
  stack->store = std::make_unique<nn::ParamStore>();
  Rng rng(arch.seed);
  auto& store = *stack->store;
  if (arch.experiment == "tetra") {
    const auto& cfg = arch.tetra;
    if (cfg.reps < 0 || cfg.width < 1 || cfg.embed < 1 || cfg.aux_dim < 1)
      throw ValidationError("tetra flow sizes must be positive");
    if (!(cfg.kappa >= 0.0)) throw ValidationError("base concentration must be non-negative");
    stack->body = methane_template();
    stack->n_bodies = 1;
    stack->aux_dim = cfg.aux_dim;
    for (int r = 0; r < cfg.reps; ++r) {
      const std::string p = "rep" + std::to_string(r);
      stack->layers.push_back(std::make_unique<TetraAuxCoupling>(store, p + ".aux", cfg, rng));
      if (cfg.rotation.kind == RotationSpec::Kind::affine) {
        stack->layers.push_back(std::make_unique<AffineRotationLayer>(store, p + ".rot"));
      } else {
        stack->layers.push_back(std::make_unique<TetraRotationCoupling>(store, p + ".rot", cfg, rng));
      }
    }
  } else if (arch.experiment == "crystal") {
    const auto& cfg = arch.crystal;
    stack->crystal.emplace(arch.crystal_params);
    const ToyCrystal& model = *stack->crystal;
    if (cfg.reps < 0 || cfg.channels < 1 || cfg.blocks < 0 || cfg.embed < 1)
      throw ValidationError("crystal flow sizes must be positive");
    if (cfg.fixed < -1 || cfg.fixed >= model.size())
      throw ValidationError("fixed molecule index out of range");
    if (!(cfg.temperature0 > 0.0)) throw ValidationError("base temperature must be positive");
    stack->body = model.body();
    stack->n_bodies = model.size();
    for (int r = 0; r < cfg.reps; ++r) {
      const std::string p = "rep" + std::to_string(r);
      stack->layers.push_back(
          std::make_unique<CrystalPositionCoupling>(store, p + ".pos", cfg, model, rng));
      stack->layers.push_back(
          std::make_unique<CrystalRotationCoupling>(store, p + ".rot", cfg, model, rng));
    }
  } else {
    throw ValidationError("unknown experiment '" + arch.experiment + "' (tetra | crystal)");
  }
  return stack;
}

void perturb_parameters(FlowStack& stack, Rng& rng, double scale) {
  for (auto& p : stack.store->all())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += scale * standard_normal(rng);
}

// ---------------------------------------------------------------------------

namespace {

Vec4 lifted(const UnitQuaternion& q, LiftSign lift, Rng* rng) {
  const Vec4 c = canonical(q).coeffs();
  switch (lift) {
    case LiftSign::plus:
      return c;
    case LiftSign::minus:
      return -c;
    case LiftSign::random:
      if (rng == nullptr) throw std::invalid_argument("random lift needs an rng");
      return uniform01(*rng) < 0.5 ? c : Vec4(-c);
  }
  return c;
}

}  // namespace

FlowState pack_augmented(Tape& t, const std::vector<AugmentedState>& xs, LiftSign lift, Rng* rng) {
  if (xs.empty()) throw ValidationError("no samples");
  const auto n = static_cast<Eigen::Index>(xs.size());
  const Eigen::Index a = xs[0].z.size();
  Tensor rot(n, 4), aux(n, a);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (xs[i].z.size() != a) throw ValidationError("inconsistent auxiliary dimension");
    rot.row(i) = lifted(xs[i].q, lift, rng).transpose();
    aux.row(i) = xs[i].z.transpose();
  }
  FlowState s;
  s.rot = t.constant(rot);
  s.aux = t.constant(aux);
  return s;
}

FlowState pack_poses(Tape& t, const std::vector<PoseSet>& xs, LiftSign lift, Rng* rng) {
  if (xs.empty()) throw ValidationError("no samples");
  const auto n = static_cast<Eigen::Index>(xs.size());
  const auto m = static_cast<Eigen::Index>(xs[0].poses.size());
  Tensor pos(n, 3 * m), rot(n, 4 * m);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(xs[i].poses.size()) != m)
      throw ValidationError("inconsistent body count");
    for (Eigen::Index k = 0; k < m; ++k) {
      pos.block(i, 3 * k, 1, 3) = xs[i].poses[k].x0.transpose();
      rot.block(i, 4 * k, 1, 4) = lifted(xs[i].poses[k].q, lift, rng).transpose();
    }
  }
  FlowState s;
  s.pos = t.constant(pos);
  s.rot = t.constant(rot);
  return s;
}

std::vector<AugmentedState> unpack_augmented(const FlowState& s) {
  const Tensor& rot = s.rot.value();
  const Tensor& aux = s.aux.value();
  std::vector<AugmentedState> out(rot.rows());
  for (Eigen::Index i = 0; i < rot.rows(); ++i) {
    out[i].q = UnitQuaternion(Vec4(rot.row(i).transpose()));
    out[i].z = aux.row(i).transpose();
  }
  return out;
}

std::vector<PoseSet> unpack_poses(const FlowState& s, const BodyTemplate& body) {
  const Tensor& rot = s.rot.value();
  const Eigen::Index m = rot.cols() / 4;
  std::vector<PoseSet> out(rot.rows());
  for (Eigen::Index i = 0; i < rot.rows(); ++i) {
    out[i].body = body;
    out[i].poses.resize(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      if (s.pos.valid()) out[i].poses[k].x0 = s.pos.value().block(i, 3 * k, 1, 3).transpose();
      out[i].poses[k].q = UnitQuaternion(Vec4(rot.block(i, 4 * k, 1, 4).transpose()));
    }
  }
  return out;
}

namespace {

template <class Sample, class Pack>
std::vector<double> batched_density(const FlowStack& stack, const std::vector<Sample>& xs,
                                    Pack pack) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t start = 0; start < xs.size(); start += kEvalBatch) {
    const std::size_t end = std::min(xs.size(), start + kEvalBatch);
    const std::vector<Sample> chunk(xs.begin() + static_cast<std::ptrdiff_t>(start),
                                    xs.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t(false);
    const Tensor lp = stack.log_density(t, pack(t, chunk)).value();
    for (Eigen::Index i = 0; i < lp.rows(); ++i) out.push_back(lp(i, 0));
  }
  return out;
}

}  // namespace

std::vector<double> flow_log_density(const FlowStack& stack, const std::vector<AugmentedState>& xs,
                                     LiftSign lift, Rng* rng) {
  if (stack.is_crystal()) throw ValidationError("augmented samples require a tetra flow");
  return batched_density(stack, xs, [&](Tape& t, const std::vector<AugmentedState>& c) {
    return pack_augmented(t, c, lift, rng);
  });
}

std::vector<double> flow_log_density(const FlowStack& stack, const std::vector<PoseSet>& xs,
                                     LiftSign lift, Rng* rng) {
  if (!stack.is_crystal()) {
    // Tetra bodies carry no auxiliaries; treat them as z = 0 is wrong, so refuse.
    throw ValidationError("pose-set densities require a crystal flow");
  }
  return batched_density(stack, xs, [&](Tape& t, const std::vector<PoseSet>& c) {
    return pack_poses(t, c, lift, rng);
  });
}

FlowSamples flow_sample(const FlowStack& stack, Rng& rng, int n) {
  if (stack.is_crystal()) throw ValidationError("the crystal base has no direct sampler; use flow_push");
  if (n < 1) throw ValidationError("sample count must be positive");
  SymVMFParams vmf;
  vmf.kappa = stack.arch.tetra.kappa;
  std::vector<AugmentedState> base(n);
  for (auto& s : base) {
    s.q = UnitQuaternion(svmf_sample(vmf, rng));
    s.z.resize(stack.aux_dim);
    for (int j = 0; j < stack.aux_dim; ++j) s.z[j] = standard_normal(rng);
  }
  FlowSamples out;
  out.states.reserve(n);
  for (std::size_t start = 0; start < base.size(); start += kEvalBatch) {
    const std::size_t end = std::min(base.size(), start + kEvalBatch);
    const std::vector<AugmentedState> chunk(base.begin() + static_cast<std::ptrdiff_t>(start),
                                            base.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t(false);
    FlowState s;
    s.rot = t.constant([&] {
      Tensor r(chunk.size(), 4);
      for (std::size_t i = 0; i < chunk.size(); ++i) r.row(i) = chunk[i].q.coeffs().transpose();
      return r;
    }());
    s.aux = t.constant([&] {
      Tensor a(chunk.size(), stack.aux_dim);
      for (std::size_t i = 0; i < chunk.size(); ++i) a.row(i) = chunk[i].z.transpose();
      return a;
    }());
    const auto mapped = unpack_augmented(stack.push_forward(t, s).state);
    out.states.insert(out.states.end(), mapped.begin(), mapped.end());
  }
  out.log_density = flow_log_density(stack, out.states, LiftSign::plus);
  out.poses.reserve(n);
  for (const auto& s : out.states) out.poses.push_back(PoseSet{stack.body, {RigidPose{Vec3::Zero(), s.q}}});
  return out;
}

PushResult flow_push(const FlowStack& stack, const std::vector<PoseSet>& base) {
  if (!stack.is_crystal()) throw ValidationError("flow_push requires a crystal flow");
  PushResult out;
  for (std::size_t start = 0; start < base.size(); start += kEvalBatch) {
    const std::size_t end = std::min(base.size(), start + kEvalBatch);
    const std::vector<PoseSet> chunk(base.begin() + static_cast<std::ptrdiff_t>(start),
                                     base.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t(false);
    const LayerResult r = stack.push_forward(t, pack_poses(t, chunk, LiftSign::plus));
    const auto poses = unpack_poses(r.state, stack.body);
    out.poses.insert(out.poses.end(), poses.begin(), poses.end());
    for (Eigen::Index i = 0; i < r.logdet.rows(); ++i) out.logdet.push_back(r.logdet.value()(i, 0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json arch_to_json(const FlowArchitecture& a) {
  json j;
  j["experiment"] = a.experiment;
  j["seed"] = a.seed;
  if (a.experiment == "tetra") {
    const auto& c = a.tetra;
    j["tetra"] = {{"rotation", c.rotation.str()}, {"reps", c.reps},       {"width", c.width},
                  {"embed", c.embed},             {"kappa", c.kappa},     {"aux_dim", c.aux_dim},
                  {"even_bias", c.even_bias},     {"head_scale", c.head_scale}};
  } else {
    const auto& c = a.crystal;
    j["crystal"] = {{"reps", c.reps},           {"channels", c.channels},   {"heads", c.heads},
                    {"rot_heads", c.rot_heads}, {"blocks", c.blocks},       {"embed", c.embed},
                    {"gate_init", c.gate_init}, {"fixed", c.fixed},         {"even_bias", c.even_bias},
                    {"temperature0", c.temperature0}};
    const auto& p = a.crystal_params;
    j["crystal_model"] = {{"n", p.n},         {"spacing", p.spacing},     {"k_t", p.k_t},
                          {"epsilon", p.epsilon}, {"sigma", p.sigma},     {"delta", p.delta},
                          {"r_cut", p.r_cut}, {"charges", p.charges},     {"bond", p.bond},
                          {"angle_deg", p.angle_deg}};
  }
  return j;
}

template <class T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(FormatError::Kind::header, std::string("model file: missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::value, std::string("model file: bad value for '") + key + "'");
  }
}

FlowArchitecture arch_from_json(const json& j) {
  FlowArchitecture a;
  a.experiment = field<std::string>(j, "experiment");
  a.seed = field<std::uint64_t>(j, "seed");
  if (a.experiment == "tetra") {
    const json& c = j.at("tetra");
    a.tetra.rotation = RotationSpec::parse(field<std::string>(c, "rotation"));
    a.tetra.reps = field<int>(c, "reps");
    a.tetra.width = field<int>(c, "width");
    a.tetra.embed = field<int>(c, "embed");
    a.tetra.kappa = field<double>(c, "kappa");
    a.tetra.aux_dim = field<int>(c, "aux_dim");
    a.tetra.even_bias = field<double>(c, "even_bias");
    a.tetra.head_scale = field<double>(c, "head_scale");
  } else if (a.experiment == "crystal") {
    const json& c = j.at("crystal");
    a.crystal.reps = field<int>(c, "reps");
    a.crystal.channels = field<int>(c, "channels");
    a.crystal.heads = field<int>(c, "heads");
    a.crystal.rot_heads = field<int>(c, "rot_heads");
    a.crystal.blocks = field<int>(c, "blocks");
    a.crystal.embed = field<int>(c, "embed");
    a.crystal.gate_init = field<double>(c, "gate_init");
    a.crystal.fixed = field<int>(c, "fixed");
    a.crystal.even_bias = field<double>(c, "even_bias");
    a.crystal.temperature0 = field<double>(c, "temperature0");
    const json& p = j.at("crystal_model");
    a.crystal_params.n = field<int>(p, "n");
    a.crystal_params.spacing = field<double>(p, "spacing");
    a.crystal_params.k_t = field<double>(p, "k_t");
    a.crystal_params.epsilon = field<double>(p, "epsilon");
    a.crystal_params.sigma = field<double>(p, "sigma");
    a.crystal_params.delta = field<double>(p, "delta");
    a.crystal_params.r_cut = field<double>(p, "r_cut");
    a.crystal_params.charges = field<std::vector<double>>(p, "charges");
    a.crystal_params.bond = field<double>(p, "bond");
    a.crystal_params.angle_deg = field<double>(p, "angle_deg");
  } else {
    throw FormatError(FormatError::Kind::value, "model file: unknown experiment '" + a.experiment + "'");
  }
  return a;
}

constexpr int kModelVersion = 1;

}  // namespace

std::string model_to_string(const FlowStack& stack) {
  json j;
  j["format"] = "rbflow-model";
  j["version"] = kModelVersion;
  j["architecture"] = arch_to_json(stack.arch);
  json layers = json::array();
  for (const auto& l : stack.layers) layers.push_back(l->name());
  j["layers"] = layers;
  if (stack.is_crystal()) {
    j["base"] = {{"kind", "boltzmann"}, {"temperature", stack.arch.crystal.temperature0}};
  } else {
    j["base"] = {{"kind", "svmf_gaussian"}, {"kappa", stack.arch.tetra.kappa}, {"aux_dim", stack.aux_dim}};
  }
  json tpl = json::array();
  for (const auto& b : stack.body.beads()) tpl.push_back({b.x(), b.y(), b.z()});
  j["template"] = tpl;
  j["seed_lineage"] = {{"build_seed", stack.arch.seed}};
  json params = json::array();
  for (const auto& p : stack.store->all()) {
    std::vector<double> data(p.value.data(), p.value.data() + p.value.size());
    params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"data", data}});
  }
  j["parameters"] = params;
  return j.dump(1) + "\n";
}

std::unique_ptr<FlowStack> model_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::header, std::string("model file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "rbflow-model")
    throw FormatError(FormatError::Kind::header, "not an rbflow model file");
  if (field<int>(j, "version") != kModelVersion)
    throw FormatError(FormatError::Kind::version, "unsupported model file version");
  auto stack = build_flow(arch_from_json(j.at("architecture")));
  const json& params = j.at("parameters");
  if (!params.is_array() || params.size() != stack->store->all().size())
    throw FormatError(FormatError::Kind::length, "model file: parameter count mismatch");
  for (const auto& e : params) {
    const auto name = field<std::string>(e, "name");
    Parameter* p = stack->store->find(name);
    if (p == nullptr) throw FormatError(FormatError::Kind::value, "model file: unknown parameter '" + name + "'");
    const auto data = field<std::vector<double>>(e, "data");
    if (field<Eigen::Index>(e, "rows") != p->value.rows() ||
        field<Eigen::Index>(e, "cols") != p->value.cols() ||
        static_cast<Eigen::Index>(data.size()) != p->value.size())
      throw FormatError(FormatError::Kind::length, "model file: shape mismatch for '" + name + "'");
    std::copy(data.begin(), data.end(), p->value.data());
  }
  return stack;
}

void model_write(const FlowStack& stack, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path);
  f << model_to_string(stack);
  if (!f) throw ValidationError("failed writing " + path);
}

std::unique_ptr<FlowStack> model_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return model_from_string(ss.str());
}

}  // namespace rbflow
