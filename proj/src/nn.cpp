#include "rbflow/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace rbflow::nn {

Parameter& ParamStore::add(const std::string& name, Tensor value) {
  if (find(name) != nullptr) throw std::logic_error("duplicate parameter name " + name);
  params_.push_back(Parameter{name, std::move(value)});
  return params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

namespace {

Tensor uniform(Rng& rng, int rows, int cols, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

}  // namespace

Dense Dense::make(ParamStore& store, const std::string& name, int in, int out, Rng& rng, Init init) {
  Dense d;
  if (init == Init::zero) {
    d.w = &store.add(name + ".w", Tensor::Zero(in, out));
    d.b = &store.add(name + ".b", Tensor::Zero(1, out));
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    d.w = &store.add(name + ".w", uniform(rng, in, out, bound));
    d.b = &store.add(name + ".b", uniform(rng, 1, out, bound));
  }
  return d;
}

Var Dense::operator()(Tape& t, const Var& x) const {
  return matmul(x, t.param(*w)) + t.param(*b);
}

Mlp Mlp::make(ParamStore& store, const std::string& name, int in, int width, Rng& rng) {
  return Mlp{Dense::make(store, name + ".l1", in, width, rng),
             Dense::make(store, name + ".l2", width, width, rng)};
}

Var Mlp::operator()(Tape& t, const Var& x) const { return gelu(l2(t, gelu(l1(t, x)))); }

FlipEmbedding FlipEmbedding::make(ParamStore& store, const std::string& name, int features, Rng& rng) {
  return FlipEmbedding{Dense::make(store, name + ".S", 4, 1, rng),
                       Dense::make(store, name + ".F", 4, features, rng)};
}

Var FlipEmbedding::operator()(Tape& t, const Var& q) const {
  const Var qm = -q;
  const Var sp = s(t, q);
  const Var sm = s(t, qm);
  // Two-way softmax written as complementary sigmoids of the logit difference.
  const Var wp = sigmoid(sp - sm);
  const Var wm = sigmoid(sm - sp);
  return wp * f(t, q) + wm * f(t, qm);
}

Attention Attention::make(ParamStore& store, const std::string& name, int channels, int heads,
                          int rot_heads, Rng& rng) {
  if (channels % heads != 0) throw std::invalid_argument("channels must be divisible by heads");
  if (rot_heads > heads) throw std::invalid_argument("more rotation heads than heads");
  Attention a;
  a.heads = heads;
  a.rot_heads = rot_heads;
  a.channels = channels;
  a.q = Dense::make(store, name + ".q", channels, channels, rng);
  a.k = Dense::make(store, name + ".k", channels, channels, rng);
  a.v = Dense::make(store, name + ".v", channels, channels, rng);
  a.o = Dense::make(store, name + ".o", channels, channels, rng);
  if (rot_heads > 0) {
    const int d = channels / heads;
    a.rq = &store.add(name + ".rq", uniform(rng, 4, rot_heads * d, 0.5));
    a.rk = &store.add(name + ".rk", uniform(rng, 4, rot_heads * d, 0.5));
  }
  return a;
}

Var Attention::operator()(Tape& t, const Var& h, const Var* quats, int tokens) const {
  const Eigen::Index rows = h.rows();
  const Eigen::Index batch = rows / tokens;
  const int d = channels / heads;
  const Var qh = q(t, h);
  const Var kh = k(t, h);
  const Var vh = v(t, h);
  Var rq_all, rk_all;
  if (rot_heads > 0) {
    if (quats == nullptr) throw std::invalid_argument("rotation heads need quaternion inputs");
    rq_all = matmul(*quats, t.param(*rq));
    rk_all = matmul(*quats, t.param(*rk));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int hd = 0; hd < heads; ++hd) {
    Var qs, ks;
    if (hd < rot_heads) {
      qs = slice_cols(rq_all, hd * d, d);
      ks = slice_cols(rk_all, hd * d, d);
    } else {
      qs = slice_cols(qh, hd * d, d);
      ks = slice_cols(kh, hd * d, d);
    }
    const Var qb = reshape(qs, batch, tokens * d);
    const Var kb = btranspose(reshape(ks, batch, tokens * d), tokens, d);
    Var logits = bmm(qb, kb, tokens, d, tokens);
    logits = hd < rot_heads ? square(logits) * (1.0 / d) : logits * scale;
    const Var attn = reshape(softmax_rows(reshape(logits, rows, tokens)), batch, tokens * tokens);
    const Var vb = reshape(slice_cols(vh, hd * d, d), batch, tokens * d);
    outs.push_back(reshape(bmm(attn, vb, tokens, tokens, d), rows, d));
  }
  return o(t, ad::concat_cols(outs));
}

Transformer Transformer::make(ParamStore& store, const std::string& name, int in, int channels,
                              int heads, int rot_heads, int blocks, Rng& rng) {
  Transformer tr;
  tr.input = Dense::make(store, name + ".in", in, channels, rng);
  for (int i = 0; i < blocks; ++i) {
    const std::string bn = name + ".block" + std::to_string(i);
    TransformerBlock blk;
    blk.attn = Attention::make(store, bn + ".attn", channels, heads, rot_heads, rng);
    blk.ff1 = Dense::make(store, bn + ".ff1", channels, 2 * channels, rng);
    blk.ff2 = Dense::make(store, bn + ".ff2", 2 * channels, channels, rng);
    tr.blocks.push_back(blk);
  }
  return tr;
}

Var Transformer::operator()(Tape& t, const Var& x, const Var* quats, int tokens) const {
  Var h = input(t, x);
  for (const auto& blk : blocks) {
    h = h + blk.attn(t, h, quats, tokens);
    h = h + blk.ff2(t, gelu(blk.ff1(t, h)));
  }
  return h;
}

Tensor one_hot_tokens(int batch, int tokens) {
  Tensor t = Tensor::Zero(static_cast<Eigen::Index>(batch) * tokens, tokens);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < tokens; ++i) t(static_cast<Eigen::Index>(b) * tokens + i, i) = 1.0;
  return t;
}

}  // namespace rbflow::nn
