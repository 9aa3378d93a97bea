#ifndef NPF_MODELS_HPP
#define NPF_MODELS_HPP

#include <string>
#include <utility>
#include <vector>

#include "npf/param_store.hpp"
#include "npf/rng.hpp"
#include "npf/setnn.hpp"
#include "npf/tape.hpp"
#include "npf/task.hpp"

namespace npf::models {

enum class Variant { CNP, NP, CANP, ANP, BNP, BANP, MPNP, MPANP, MPNP_DSI, MPNP_DSE };

const char* variant_name(Variant v);
Variant variant_from_string(const std::string& name);

bool is_attentive(Variant v);   // CANP family
bool has_latent(Variant v);     // NP, ANP
bool is_mp(Variant v);          // MPNP, MPANP
bool is_direct(Variant v);      // MPNP_DSI, MPNP_DSE
bool is_bootstrap(Variant v);   // BNP, BANP
bool is_stochastic(Variant v);  // everything but CNP/CANP

struct ModelConfig {
  Variant variant = Variant::CNP;
  int d_x = 1;
  int d_y = 1;
  int d_hid = 128;
  int n_head = 8;
  int K = 10;      // posterior samples for stochastic variants
  int n_gen = 8;   // generated pseudo-context size (MP variants)
  bool per_head_scale = false;  // attention logit scaling switch
};

// The amortized function parameter: per-point representations plus pooled /
// attended summaries, and the latent-path moments where the variant has one.
// All leading layouts are [B, S, ...] with S the pseudo/posterior sample axis
// (S = 1 on the deterministic path).
struct FunctionRep {
  Var per_point;     // [B, n, h] pointwise context reps (CNP family)
  Var pooled;        // [B, S, h]
  Var r_q;           // [B, n, h] (CANP family; also the key source)
  Var r_v;           // [B, n, h] value reps after self-attention
  Var cross;         // [B, S, n, h] cross-attention output per target point
  Var latent_m;      // [B, h]
  Var latent_s;      // [B, h], floored at 0.1
  Var ctx_mask;      // [B, n] constant
  Var counts;        // [B, 1] context sizes
};

// K generated pseudo-context sets (representation-space, key/value space, or
// raw pairs for the direct variants) together with the epsilon seeds used.
struct PseudoSet {
  Var reps;    // MPNP: [B, K, g, h]
  Var keys;    // MPANP: [B, K, g, h]
  Var values;  // MPANP: [B, K, g, h]
  Var x;       // direct variants: [B, K, g, d_x]
  Var y;       // direct variants: [B, K, g, d_y]
  Var eps;     // the i.i.d. seeds the set was generated from
  int k = 0;
  int n_gen = 0;
};

struct PredictiveOutput {
  Var mu;     // [B, S, n, d_y]
  Var sigma;  // [B, S, n, d_y], > 0.1
  bool stochastic = false;  // sample axis is meaningful (S = K)
};

struct DecodeInputs {
  Var x;           // [B, n, d_x] or [B, S, n, d_x]
  Var rep;         // [B, S, h] pooled or [B, S, n, h] per-target
  Var latent;      // optional [B, S, h]
  Var extra_full;  // optional [B, S(, n), d_in] residual added to the full
                   // decoder input vector (bootstrap adaptation)
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  ParamStore init_params(std::uint64_t seed) const;

  // Deterministic encoder paths (context representations, pooled summary,
  // cross-attention output for the attentive family).
  FunctionRep encode(Tape& t, const TaskBatch& task) const;

  // Latent path q(theta | subset) for NP/ANP; `subset_mask` is [B, n].
  std::pair<Var, Var> encode_latent(Tape& t, const TaskBatch& task,
                                    const Tensor& subset_mask) const;

  // K pseudo-context sets in representation space (MPNP/MPANP).
  PseudoSet generate_pseudo(Tape& t, const FunctionRep& rep, int k_samples, Rng& rng) const;

  // theta~ for the union (include_real = true) or the pseudo set alone.
  FunctionRep amortize(Tape& t, const FunctionRep& rep, const PseudoSet& pseudo,
                       bool include_real = true) const;

  PredictiveOutput decode(Tape& t, const DecodeInputs& in) const;

  // Full pipeline: K-sample predictive at the task's points conditioned on
  // its context. rng may be null for deterministic variants.
  PredictiveOutput predict(Tape& t, const TaskBatch& task, int k_samples, Rng* rng) const;

  // Paired bootstrap resample of one task's context (absolute row indices of
  // length n; non-context rows map to themselves).
  std::vector<i64> bootstrap_indices(const TaskBatch& task, i64 b, Rng& rng) const;

  // Raw-space pseudo pairs (Appendix-style direct variants).
  PseudoSet generate_direct(Tape& t, const FunctionRep& rep, const TaskBatch& task,
                            int k_samples, Rng& rng) const;

  // theta~(Z_c u Z') for direct variants: encodes the raw union per sample.
  struct DirectUnion {
    Var pooled;  // [B, K, h]
    Var x;       // [B, K, n+g, d_x]
    Var y;       // [B, K, n+g, d_y]
    Var mask;    // [B, K, n+g, 1] union membership (context rows + pseudo rows)
  };
  DirectUnion encode_direct_union(Tape& t, const TaskBatch& task, const PseudoSet& pseudo) const;

  // Bootstrap predictive used by BNP/BANP (K resamples).
  PredictiveOutput predict_bootstrap(Tape& t, const TaskBatch& task, const FunctionRep& rep,
                                     int k_samples, Rng& rng) const;

 private:
  ModelConfig cfg_;

  setnn::MLPSpec det_spec() const;
  setnn::MLPSpec lat_spec() const;
  setnn::MLPSpec qk_spec() const;
  setnn::MLPSpec dec_spec() const;
  setnn::MHASpec att_spec(int d_out) const;
  int dec_d_in() const;
  int direct_gen_heads() const;

  Var pooled_mean(Tape& t, Var per_point, Var mask_row, Var counts) const;
};

// epsilon tensor [B, K, g, dim] drawn i.i.d. standard normal
Tensor sample_eps(i64 batch, int k, int g, int dim, Rng& rng, Dtype dt);

}  // namespace npf::models

#endif
