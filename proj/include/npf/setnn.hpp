#ifndef NPF_SETNN_HPP
#define NPF_SETNN_HPP

#include <string>

#include "npf/param_store.hpp"
#include "npf/rng.hpp"
#include "npf/tape.hpp"

// Set-attention and feed-forward building blocks. Parameters live in a
// ParamStore under "<prefix>.<layer>.weight|bias" names; the builders emit
// tape graphs and can be freely re-invoked (e.g. per pseudo-sample) since
// parameter nodes are cached by name.
namespace npf::setnn {

struct MLPSpec {
  int n_layers;  // total linear layers, >= 2
  int d_in;
  int d_hid;
  int d_out;
};

struct MHASpec {
  int n_head;
  int d_out;
  // scale logits by 1/sqrt(d_out) as written in the source material; the
  // per-head alternative 1/sqrt(d_out/n_head) is a config switch
  bool per_head_scale = false;
};

enum class IsabCond {
  Learned,   // trainable inducing points I in R^{m x d_out}
  Supplied,  // conditioning set passed at call time
};

struct ISABSpec {
  int n_head;
  int d_out;
  IsabCond mode = IsabCond::Learned;
  int n_inducing = 0;  // learned mode only
};

// ---- initialization (fan-in scaled uniform weights, zero biases) ----

void init_linear(ParamStore& ps, const std::string& name, int d_in, int d_out, Rng& rng);
void init_mlp(ParamStore& ps, const std::string& prefix, const MLPSpec& spec, Rng& rng);
void init_layer_norm(ParamStore& ps, const std::string& name, int dim);
void init_mha(ParamStore& ps, const std::string& prefix, int d_q, int d_k, int d_v,
              const MHASpec& spec, Rng& rng);
// d_x: dim of the main input set; d_cond: dim of the conditioning set
// (supplied mode) — inducing points are d_out-dimensional in learned mode.
void init_isab(ParamStore& ps, const std::string& prefix, int d_x, int d_cond,
               const ISABSpec& spec, Rng& rng);

// ---- graph builders ----

Var linear(Tape& t, const std::string& name, Var x);

// Pointwise MLP over the last axis.
Var mlp(Tape& t, const std::string& prefix, const MLPSpec& spec, Var x);

// Multi-head attention. q: [.., n_q, d_q]; k: [.., n_kv, d_k]; v: [.., n_kv,
// d_v]; leading axes broadcast. key_mask (optional, pass {} for none) is a
// 0/1 tensor [.., n_kv] broadcastable over the logits' leading axes; masked
// keys get -1e9 logits. A second key/value set may be supplied pre-projection
// (set-concatenated after the linear maps, which is exactly the attention
// over the concatenated set).
struct KvPair {
  Var k;
  Var v;
  Var mask;  // optional
};
Var mha(Tape& t, const std::string& prefix, const MHASpec& spec, Var q, Var k, Var v,
        Var key_mask = {}, const KvPair* extra = nullptr);

Var sa(Tape& t, const std::string& prefix, const MHASpec& spec, Var x, Var mask = {});
Var mab(Tape& t, const std::string& prefix, const MHASpec& spec, Var x, Var y, Var y_mask = {});

// Induced set attention: H = MAB(cond, X); out = MAB(X, H). In learned mode
// cond is the trainable inducing set; in supplied mode pass cond explicitly
// (cond_mask masks conditioning rows in both MABs).
Var isab(Tape& t, const std::string& prefix, const ISABSpec& spec, Var x, Var cond = {},
         Var cond_mask = {}, Var x_mask = {});

}  // namespace npf::setnn

#endif
