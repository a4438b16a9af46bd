#include <doctest.h>

#include <cmath>

#include "rbflow/nn.hpp"

using namespace rbflow;
using namespace rbflow::nn;

namespace {

Tensor random_quats(Rng& rng, int rows) {
  Tensor q(rows, 4);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < 4; ++c) q(r, c) = standard_normal(rng);
    q.row(r).normalize();
  }
  return q;
}

}  // namespace

TEST_CASE("flip embedding is bitwise invariant under q -> -q") {
  Rng rng(3);
  ParamStore store;
  auto emb = FlipEmbedding::make(store, "e", 6, rng);
  const Tensor q = random_quats(rng, 200);
  Tape t(false);
  const Tensor a = emb(t, t.constant(q)).value();
  const Tensor b = emb(t, t.constant(Tensor(-q))).value();
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("flip embedding with zero selector is the even part of F") {
  Rng rng(4);
  ParamStore store;
  auto emb = FlipEmbedding::make(store, "e", 5, rng);
  store.find("e.S.w")->value.setZero();
  store.find("e.S.b")->value.setZero();
  const Tensor q = random_quats(rng, 50);
  Tape t(false);
  const Tensor g = emb(t, t.constant(q)).value();
  const Tensor& w = store.find("e.F.w")->value;
  const Tensor& b = store.find("e.F.b")->value;
  Tensor fp = q * w, fm = -q * w;
  fp.rowwise() += b.row(0);
  fm.rowwise() += b.row(0);
  const Tensor even = 0.5 * (fp + fm);
  CHECK((g - even).cwiseAbs().maxCoeff() < 1e-14);

  // An odd F (no bias) averages to zero.
  store.find("e.F.b")->value.setZero();
  Tape t2(false);
  CHECK(emb(t2, t2.constant(q)).value().cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("rotation attention heads ignore quaternion signs") {
  Rng rng(5);
  ParamStore store;
  const int batch = 3, tokens = 5;
  auto tr = Transformer::make(store, "tr", tokens, 32, 8, 4, 2, rng);
  const Tensor x = one_hot_tokens(batch, tokens);
  const Tensor q = random_quats(rng, batch * tokens);
  Tensor qf = q;
  for (int r = 0; r < qf.rows(); r += 2) qf.row(r) *= -1.0;
  Tape t(false);
  const Var qa = t.constant(q), qb = t.constant(qf);
  const Tensor a = tr(t, t.constant(x), &qa, tokens).value();
  const Tensor b = tr(t, t.constant(x), &qb, tokens).value();
  CHECK(a.rows() == batch * tokens);
  CHECK(a.cols() == 32);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("attention is permutation equivariant over tokens") {
  Rng rng(6);
  ParamStore store;
  const int tokens = 4;
  auto tr = Transformer::make(store, "tr", 3, 16, 4, 0, 1, rng);
  Tensor x(tokens, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  Tensor xp(tokens, 3);
  const int perm[tokens] = {2, 0, 3, 1};
  for (int i = 0; i < tokens; ++i) xp.row(i) = x.row(perm[i]);
  Tape t(false);
  const Tensor a = tr(t, t.constant(x), nullptr, tokens).value();
  const Tensor b = tr(t, t.constant(xp), nullptr, tokens).value();
  for (int i = 0; i < tokens; ++i) CHECK((b.row(i) - a.row(perm[i])).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("transformer and flip embedding gradients match finite differences") {
  Rng rng(7);
  ParamStore store;
  const int batch = 2, tokens = 3;
  auto tr = Transformer::make(store, "tr", 4, 16, 4, 2, 1, rng);
  auto emb = FlipEmbedding::make(store, "e", 4, rng);
  const Tensor q = random_quats(rng, batch * tokens);
  const ad::ScalarFn f = [&](Tape& t, const std::vector<Var>& v) {
    const Var h = tr(t, emb(t, v[0]), &v[0], tokens);
    return sum(square(h)) * 0.1;
  };
  CHECK(ad::finite_diff_check(f, {q}, 1e-6) < 1e-6);
}

TEST_CASE("zero init and store bookkeeping") {
  Rng rng(8);
  ParamStore store;
  auto d = Dense::make(store, "head", 7, 3, rng, Init::zero);
  CHECK(d.in() == 7);
  CHECK(d.out() == 3);
  CHECK(store.count() == 24);
  CHECK(store.find("head.w")->value.isZero());
  CHECK_THROWS(store.add("head.w", Tensor::Zero(1, 1)));
  const Tensor oh = one_hot_tokens(2, 3);
  CHECK(oh.rows() == 6);
  CHECK(oh(4, 1) == 1.0);
  CHECK(oh.sum() == 6.0);
}
