#include "rbflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "json.hpp"
#include "rbflow/errors.hpp"
#include "rbflow/estimators.hpp"

namespace rbflow {

using nlohmann::json;

void adam_step(nn::ParamStore& store, const std::vector<Tensor>& grads, AdamState& st, double lr,
               const AdamConfig& cfg) {
  auto& ps = store.all();
  if (grads.size() != ps.size()) throw ValidationError("one gradient per parameter required");
  if (st.m.empty()) {
    for (const auto& p : ps) {
      st.m.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
      st.v.push_back(Tensor::Zero(p.value.rows(), p.value.cols()));
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(st.t));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor& g = grads[i];
    if (g.rows() != ps[i].value.rows() || g.cols() != ps[i].value.cols())
      throw ValidationError("gradient shape mismatch for " + ps[i].name);
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    ps[i].value.array() -=
        lr * (st.m[i].array() / c1) / ((st.v[i].array() / c2).sqrt() + cfg.eps);
  }
}

double cosine_lr(long long step, long long total, double lr_start, double lr_end) {
  if (total < 1 || step < 0 || step > total) throw ValidationError("cosine schedule step out of range");
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(M_PI * double(step) / double(total)));
}

void TrainConfig::validate() const {
  if (loss != "nll" && loss != "rkl") throw ValidationError("loss must be nll or rkl");
  if (schedule != "constant" && schedule != "cosine")
    throw ValidationError("schedule must be constant or cosine");
  if (batch < 1) throw ValidationError("batch must be at least 1");
  if (epochs < 1 || steps_per_epoch < 1) throw ValidationError("epochs and steps must be positive");
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (schedule == "cosine" && !(lr_end > 0.0)) throw ValidationError("final learning rate must be positive");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
    throw ValidationError("eval fraction must lie in (0, 1)");
  if (!(target_temperature > 0.0)) throw ValidationError("target temperature must be positive");
}

double TrainConfig::lr_at(long long step) const {
  if (schedule == "constant") return lr;
  return cosine_lr(step, std::max<long long>(1, total_steps() - 1), lr, lr_end);
}

TrainConfig TrainConfig::tetra_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::crystal_defaults() {
  TrainConfig c;
  c.loss = "rkl";
  c.schedule = "cosine";
  c.epochs = 10;
  c.steps_per_epoch = 1000;
  c.lr = 1e-3;
  c.lr_end = 1e-5;
  c.eval_fraction = 0.5;
  return c;
}

// ---------------------------------------------------------------------------

std::vector<AugmentedState> augment(const std::vector<UnitQuaternion>& qs, int aux_dim, Rng& rng) {
  std::vector<AugmentedState> out(qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    out[i].q = qs[i];
    out[i].z.resize(aux_dim);
    for (int d = 0; d < aux_dim; ++d) out[i].z[d] = standard_normal(rng);
  }
  return out;
}

Var nll_loss(Tape& t, const FlowStack& stack, const std::vector<AugmentedState>& batch) {
  if (stack.is_crystal()) throw ValidationError("NLL training expects a tetra flow");
  return -mean(stack.log_density(t, pack_augmented(t, batch, LiftSign::plus)));
}

TapeEnergy crystal_target(const FlowStack& stack, double temperature) {
  if (!stack.is_crystal()) throw ValidationError("crystal target needs a crystal flow");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  const ToyCrystal* model = &*stack.crystal;
  return [model, temperature](const Var& pos, const Var& rot) {
    return crystal_energy_tape(pos, rot, *model) * (1.0 / temperature);
  };
}

Var rkl_loss(Tape& t, const FlowStack& stack, const std::vector<PoseSet>& base,
             const TapeEnergy& u1) {
  if (!stack.is_crystal()) throw ValidationError("reverse-KL training expects a crystal flow");
  const FlowState x = pack_poses(t, base, LiftSign::plus);
  const LayerResult y = stack.push_forward(t, x);
  return mean(u1(y.state.pos, y.state.rot) - y.logdet + stack.base_log_prob(t, x));
}

LossGrad loss_and_grad(const FlowStack& stack, const LossFn& loss) {
  Tape t(true);
  const Var l = loss(t);
  t.backward(l);
  LossGrad out;
  out.loss = l.scalar();
  for (const auto& p : stack.store->all()) out.grads.push_back(t.grad(t.param(p)));
  return out;
}

double loss_gradient_check(FlowStack& stack, const LossFn& loss, Rng& rng, int probes, double h) {
  const LossGrad ad = loss_and_grad(stack, loss);
  auto& ps = stack.store->all();
  std::vector<std::size_t> offsets{0};
  for (const auto& p : ps) offsets.push_back(offsets.back() + static_cast<std::size_t>(p.value.size()));
  if (offsets.back() == 0) return 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, offsets.back() - 1);
  auto value = [&]() {
    Tape t(false);
    return loss(t).scalar();
  };
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    const std::size_t flat = pick(rng);
    const std::size_t pi =
        static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    const Eigen::Index e = static_cast<Eigen::Index>(flat - offsets[pi]);
    double& x = ps[pi].value.data()[e];
    const double x0 = x;
    x = x0 + h;
    const double fp = value();
    x = x0 - h;
    const double fm = value();
    x = x0;
    const double fd = (fp - fm) / (2.0 * h);
    const double g = ad.grads[pi].data()[e];
    worst = std::max(worst, std::abs(g - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

std::string params_digest(const FlowStack& stack) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : stack.store->all()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    for (std::size_t i = 0; i < sizeof(double) * static_cast<std::size_t>(p.value.size()); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

std::string TrainLog::records() const {
  std::string out;
  for (const auto& s : steps) {
    json j = {{"type", "step"}, {"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss},
              {"lr", s.lr},     {"grad_norm", s.grad_norm}};
    out += j.dump() + "\n";
  }
  for (const auto& e : epochs) {
    json j = {{"type", "epoch"}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"eval", e.eval},
              {"mean_work", e.mean_work}, {"ess_percent", e.ess_percent}};
    out += j.dump() + "\n";
  }
  return out;
}

void split_indices(std::size_t n, double eval_fraction, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& eval) {
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * double(n)));
  if (n_eval < 1 || n_eval >= n) throw ValidationError("dataset too small to split");
  train.clear();
  eval.clear();
  for (std::size_t i = 0; i < n - n_eval; ++i) train.push_back(i);
  for (std::size_t i = n - n_eval; i < n; ++i) eval.push_back(i);
}

double tetra_eval_nll(const FlowStack& stack, const std::vector<UnitQuaternion>& qs,
                      std::uint64_t seed) {
  Rng rng(seed);
  const auto lp = flow_log_density(stack, augment(qs, stack.aux_dim, rng));
  double s = 0.0;
  for (double v : lp) s += v;
  return -s / double(lp.size());
}

namespace {

struct Loop {
  const TrainConfig& cfg;
  FlowStack& stack;
  const StepHook& hook;
  TrainLog log;
};

double grad_norm(const std::vector<Tensor>& g) {
  double s = 0.0;
  for (const auto& t : g) s += t.squaredNorm();
  return std::sqrt(s);
}

// Runs every step; `make_loss` builds the batch loss from a batch rng and
// `evaluate` fills the held-out part of an epoch record.
void run_loop(Loop& loop, const std::function<Var(Tape&, Rng&)>& make_loss,
              const std::function<void(EpochRecord&)>& evaluate) {
  const TrainConfig& cfg = loop.cfg;
  Rng batch_rng(derive_seed(cfg.seed, 1));
  AdamState adam;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      const LossGrad lg = loss_and_grad(loop.stack, [&](Tape& t) { return make_loss(t, batch_rng); });
      const double gn = grad_norm(lg.grads);
      if (!std::isfinite(lg.loss) || !std::isfinite(gn)) {
        throw NumericalError("training diverged at step " + std::to_string(step) +
                                 " (parameters " + params_digest(loop.stack) + ")",
                             lg.loss);
      }
      StepRecord rec{step, epoch, lg.loss, cfg.lr_at(step), gn};
      adam_step(*loop.stack.store, lg.grads, adam, rec.lr, cfg.adam);
      loss_sum += lg.loss;
      loop.log.steps.push_back(rec);
      if (loop.hook) loop.hook(rec);
    }
    EpochRecord er;
    er.epoch = epoch;
    er.mean_loss = loss_sum / cfg.steps_per_epoch;
    evaluate(er);
    loop.log.epochs.push_back(er);
  }
}

double tail_mean(const std::vector<StepRecord>& steps, std::size_t window) {
  const std::size_t n = std::min(window, steps.size());
  double s = 0.0;
  for (std::size_t i = steps.size() - n; i < steps.size(); ++i) s += steps[i].loss;
  return s / double(n);
}

}  // namespace

TrainResult train_tetra(const Dataset& data, const TetraFlowConfig& arch, const TrainConfig& cfg,
                        const StepHook& on_step) {
  cfg.validate();
  if (cfg.loss != "nll") throw ValidationError("the tetra recipe trains by likelihood");
  if (data.meta.n_bodies != 1) throw ValidationError("tetra data must hold one body per frame");
  TrainResult res;
  split_indices(data.frames.size(), cfg.eval_fraction, res.train_index, res.eval_index);
  std::vector<UnitQuaternion> train_q, eval_q;
  for (auto i : res.train_index) train_q.push_back(data.frames[i].poses[0].q);
  for (auto i : res.eval_index) eval_q.push_back(data.frames[i].poses[0].q);

  res.stack = build_tetra_flow(arch, cfg.seed);
  Loop loop{cfg, *res.stack, on_step, {}};
  std::uniform_int_distribution<std::size_t> pick(0, train_q.size() - 1);
  const std::uint64_t eval_seed = derive_seed(cfg.seed, 2);
  run_loop(
      loop,
      [&](Tape& t, Rng& rng) {
        std::vector<UnitQuaternion> qs(cfg.batch);
        for (auto& q : qs) q = train_q[pick(rng)];
        return nll_loss(t, *res.stack, augment(qs, res.stack->aux_dim, rng));
      },
      [&](EpochRecord& er) { er.eval = tetra_eval_nll(*res.stack, eval_q, eval_seed); });
  res.log = std::move(loop.log);

  json s;
  s["experiment"] = "tetra";
  s["rotation"] = arch.rotation.str();
  s["seed"] = cfg.seed;
  s["steps"] = cfg.total_steps();
  s["final_loss"] = tail_mean(res.log.steps, 100);
  s["eval_nll"] = res.log.epochs.back().eval;
  s["train_frames"] = res.train_index.size();
  s["eval_frames"] = res.eval_index.size();
  s["params_digest"] = params_digest(*res.stack);
  res.log.summary = s.dump(2) + "\n";
  return res;
}

TrainResult train_crystal(const Dataset& data, const CrystalFlowConfig& arch,
                          const CrystalParams& params, const TrainConfig& cfg,
                          const StepHook& on_step) {
  cfg.validate();
  if (cfg.loss != "rkl") throw ValidationError("the crystal recipe trains by reverse KL");
  if (data.meta.n_bodies != params.n) throw ValidationError("crystal data does not match the molecule count");
  if (std::abs(data.meta.temperature - arch.temperature0) > 1e-12 * arch.temperature0)
    throw ValidationError("crystal data temperature differs from the base temperature");
  TrainResult res;
  split_indices(data.frames.size(), cfg.eval_fraction, res.train_index, res.eval_index);
  std::vector<PoseSet> eval;
  for (auto i : res.eval_index) eval.push_back(data.frames[i]);

  res.stack = build_crystal_flow(arch, params, cfg.seed);
  Loop loop{cfg, *res.stack, on_step, {}};
  std::uniform_int_distribution<std::size_t> pick(0, res.train_index.size() - 1);
  const TapeEnergy u1 = crystal_target(*res.stack, cfg.target_temperature);
  run_loop(
      loop,
      [&](Tape& t, Rng& rng) {
        std::vector<PoseSet> batch;
        batch.reserve(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) batch.push_back(data.frames[res.train_index[pick(rng)]]);
        return rkl_loss(t, *res.stack, batch, u1);
      },
      [&](EpochRecord& er) {
        const auto w = crystal_works(*res.stack, eval, arch.temperature0, cfg.target_temperature);
        const LfepResult lf = lfep_estimate(w);
        std::vector<double> lw(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) lw[i] = -w[i];
        er.eval = lf.delta_f;
        er.mean_work = lf.mean_work;
        er.ess_percent = 100.0 * kish_ess(lw) / double(w.size());
      });
  res.log = std::move(loop.log);

  const EpochRecord& last = res.log.epochs.back();
  json s;
  s["experiment"] = "crystal";
  s["seed"] = cfg.seed;
  s["steps"] = cfg.total_steps();
  s["base_temperature"] = arch.temperature0;
  s["target_temperature"] = cfg.target_temperature;
  s["final_loss"] = tail_mean(res.log.steps, 100);
  s["lfep_delta_f"] = last.eval;
  s["lfep_delta_f_per_molecule"] = last.eval / params.n;
  s["mean_work"] = last.mean_work;
  s["ess_percent"] = last.ess_percent;
  s["train_frames"] = res.train_index.size();
  s["eval_frames"] = res.eval_index.size();
  s["params_digest"] = params_digest(*res.stack);
  res.log.summary = s.dump(2) + "\n";
  return res;
}

}  // namespace rbflow
