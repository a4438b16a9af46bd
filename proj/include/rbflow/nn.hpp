#pragma once

// Conditioner networks: dense layers, the flip-invariant quaternion embedding
// and small transformer encoders over molecule tokens.

#include <deque>
#include <string>
#include <vector>

#include "rbflow/autodiff.hpp"
#include "rbflow/random.hpp"

namespace rbflow::nn {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Owns every trainable tensor of a model. Element addresses are stable, so
/// layers keep plain pointers into the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter& add(const std::string& name, Tensor value);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t count() const;

 private:
  std::deque<Parameter> params_;
};

enum class Init { fan_in, zero };

struct Dense {
  const Parameter* w = nullptr;  // (in x out)
  const Parameter* b = nullptr;  // (1 x out)

  static Dense make(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                    Init init = Init::fan_in);
  Var operator()(Tape& t, const Var& x) const;
  int in() const { return static_cast<int>(w->value.rows()); }
  int out() const { return static_cast<int>(w->value.cols()); }
};

/// Two GELU dense layers (the conditioner trunk).
struct Mlp {
  Dense l1, l2;

  static Mlp make(ParamStore& store, const std::string& name, int in, int width, Rng& rng);
  Var operator()(Tape& t, const Var& x) const;
};

/// G(q) = sum_s softmax_s(S(s q)) F(s q) over s in {+1, -1}; identical for q
/// and -q to the last bit.
struct FlipEmbedding {
  Dense s, f;

  static FlipEmbedding make(ParamStore& store, const std::string& name, int features, Rng& rng);
  /// `q` is (R x 4); the result is (R x features).
  Var operator()(Tape& t, const Var& q) const;
};

/// Multi-head self-attention over N tokens per sample. Token rows are laid out
/// sample-major: row b * N + i. Optional "rotation" heads take their logits
/// from bias-free linear maps of a per-token quaternion and square them, which
/// makes them invariant under the sign of either quaternion.
struct Attention {
  int heads = 8;
  int rot_heads = 0;
  int channels = 32;
  Dense q, k, v, o;
  const Parameter* rq = nullptr;  // (4 x rot_heads * head_dim)
  const Parameter* rk = nullptr;

  static Attention make(ParamStore& store, const std::string& name, int channels, int heads,
                        int rot_heads, Rng& rng);
  Var operator()(Tape& t, const Var& h, const Var* quats, int tokens) const;
};

struct TransformerBlock {
  Attention attn;
  Dense ff1, ff2;
};

/// Input projection, `blocks` residual attention + feed-forward blocks.
struct Transformer {
  Dense input;
  std::vector<TransformerBlock> blocks;

  static Transformer make(ParamStore& store, const std::string& name, int in, int channels,
                          int heads, int rot_heads, int blocks, Rng& rng);
  /// `x` is (B*N x in); `quats` (B*N x 4) is required when rotation heads exist.
  Var operator()(Tape& t, const Var& x, const Var* quats, int tokens) const;
  int channels() const { return input.out(); }
};

/// One-hot index encodings for N tokens repeated over B samples: (B*N x N).
Tensor one_hot_tokens(int batch, int tokens);

}  // namespace rbflow::nn
