#ifndef NPF_OBJECTIVES_HPP
#define NPF_OBJECTIVES_HPP

#include <vector>

#include "npf/models.hpp"
#include "npf/task.hpp"

namespace npf::objectives {

using models::Model;
using models::PredictiveOutput;

// Per-point log-likelihood [B, S, n]: isotropic Gaussian density summed over
// the d_y output dimensions. y may be a graph value (direct variants).
Var pointwise_ll(Var y, const PredictiveOutput& po);

// Masked per-task sums: [B, S, n] * [B, 1, n] summed over points -> [B, S].
Var task_ll_sums(Var ll_pp, Var mask_row);

// ---- training losses (scalar graph nodes, batch means of per-task sums) ----

// CNP objective: sum_i l(z_i, theta~(Z_c)) over context u target.
Var loss_amort(const Model& m, Tape& t, const TaskBatch& task);

// Marginal-likelihood estimator over K pseudo sets (max-shifted log-mean-exp).
Var loss_marg(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

// CNP objective conditioned on each pseudo set alone, averaged over K.
Var loss_pseudo(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

struct LossBreakdown {
  Var marg;
  Var amort;
  Var pseudo;
  Var total;
  int k_marg = 0;
  int k_pseudo = 0;
};

// The three-term loss with one shared draw of K pseudo sets.
LossBreakdown loss_total(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

// Negative ELBO with one reparameterized latent sample from q(theta|Z) and a
// closed-form diagonal-Gaussian KL against q(theta|Z_c).
Var loss_np_elbo(const Model& m, Tape& t, const TaskBatch& task, Rng& rng);

// Direct-generation loss: marginal estimator over raw-pair unions plus the
// amortization term over union members, as a positive loss.
Var loss_direct(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

// Mean NLL over K paired-bootstrap predictions (BNP/BANP).
Var loss_bootstrap(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

// The variant's own training objective.
Var training_loss(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng);

// Closed-form KL(N(m1, s1^2) || N(m2, s2^2)) summed over the last axis.
Var diag_gaussian_kl(Var m1, Var s1, Var m2, Var s2);

// ---- evaluation ----

struct EvalRecord {
  double context_ll = 0;  // nats per point, averaged over tasks
  double target_ll = 0;
  double task_ll = 0;
  int k_used = 1;
  std::vector<double> per_task_context;
  std::vector<double> per_task_target;
  std::vector<double> per_task_task;
};

// Normalized predictive log-likelihood with the K-sample mixture
// approximation; deterministic variants use the plain normalized metric.
// Mixture combination runs in f64 on the host.
EvalRecord eval_ll(const Model& m, ParamStore& params, const TaskBatch& task, int k_samples,
                   Rng& rng);

}  // namespace npf::objectives

#endif
