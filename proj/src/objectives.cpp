#include "npf/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace npf::objectives {

using models::FunctionRep;
using models::PseudoSet;
using models::Variant;

namespace {

Tensor union_mask(const TaskBatch& task) {
  Tensor m(task.ctx_mask.shape(), Dtype::F64);
  for (i64 i = 0; i < m.numel(); ++i) m.set(i, task.ctx_mask.at(i) + task.tgt_mask.at(i));
  return m;
}

Var mask_row_const(Tape& t, const Tensor& mask) {
  const i64 B = mask.extent(0), n = mask.extent(1);
  return reshape(t.constant(mask), {B, 1, n});
}

Var batch_mean(Var per_task) {  // [B] or [B, 1] -> scalar
  const double b = static_cast<double>(per_task.extent(0));
  return sum_all(per_task) * (1.0 / b);
}

// decode inputs for the deterministic theta~(Z_c) path
models::DecodeInputs det_inputs(const Model& m, Tape& t, const TaskBatch& task,
                                const FunctionRep& rep) {
  models::DecodeInputs in;
  in.x = t.constant(task.x);
  in.rep = models::is_attentive(m.config().variant) ? rep.cross : rep.pooled;
  return in;
}

Var marg_from(const Model& m, Tape& t, const TaskBatch& task, const FunctionRep& rep,
              const PseudoSet& ps, int k_samples) {
  FunctionRep rep_union = m.amortize(t, rep, ps, /*include_real=*/true);
  models::DecodeInputs in;
  in.x = t.constant(task.x);
  in.rep = m.config().variant == Variant::MPNP ? rep_union.pooled : rep_union.cross;
  PredictiveOutput po = m.decode(t, in);
  Var ll = pointwise_ll(t.constant(task.y), po);
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));  // [B, S]
  const double k_eff = static_cast<double>(sums.extent(-1));
  Var per_task = -(logsumexp_lastdim(sums) - std::log(k_eff));
  (void)k_samples;
  return batch_mean(per_task);
}

Var pseudo_from(const Model& m, Tape& t, const TaskBatch& task, const FunctionRep& rep,
                const PseudoSet& ps) {
  if (ps.n_gen == 0)
    throw std::runtime_error("loss_pseudo: empty pseudo set (theta~ of an empty set undefined)");
  FunctionRep rep_ps = m.amortize(t, rep, ps, /*include_real=*/false);
  models::DecodeInputs in;
  in.x = t.constant(task.x);
  in.rep = m.config().variant == Variant::MPNP ? rep_ps.pooled : rep_ps.cross;
  PredictiveOutput po = m.decode(t, in);
  Var ll = pointwise_ll(t.constant(task.y), po);
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));  // [B, K]
  return batch_mean(-mean(sums, -1));
}

}  // namespace

Var pointwise_ll(Var y, const PredictiveOutput& po) {
  Var ll = gaussian_log_density(y, po.mu, po.sigma);  // [B, S, n, d_y]
  return sum(ll, -1);
}

Var task_ll_sums(Var ll_pp, Var mask_row) { return sum(ll_pp * mask_row, -1); }

Var loss_amort(const Model& m, Tape& t, const TaskBatch& task) {
  FunctionRep rep = m.encode(t, task);
  PredictiveOutput po = m.decode(t, det_inputs(m, t, task, rep));
  Var ll = pointwise_ll(t.constant(task.y), po);             // [B, 1, n]
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));
  return batch_mean(-sums);
}

Var loss_marg(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng) {
  FunctionRep rep = m.encode(t, task);
  PseudoSet ps = m.generate_pseudo(t, rep, k_samples, rng);
  return marg_from(m, t, task, rep, ps, k_samples);
}

Var loss_pseudo(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng) {
  FunctionRep rep = m.encode(t, task);
  PseudoSet ps = m.generate_pseudo(t, rep, k_samples, rng);
  return pseudo_from(m, t, task, rep, ps);
}

LossBreakdown loss_total(const Model& m, Tape& t, const TaskBatch& task, int k_samples,
                         Rng& rng) {
  FunctionRep rep = m.encode(t, task);
  PseudoSet ps = m.generate_pseudo(t, rep, k_samples, rng);  // one draw shared by both terms
  LossBreakdown lb;
  lb.k_marg = k_samples;
  lb.k_pseudo = k_samples;
  lb.marg = marg_from(m, t, task, rep, ps, k_samples);
  {
    PredictiveOutput po = m.decode(t, det_inputs(m, t, task, rep));
    Var ll = pointwise_ll(t.constant(task.y), po);
    lb.amort = batch_mean(-task_ll_sums(ll, mask_row_const(t, union_mask(task))));
  }
  lb.pseudo = pseudo_from(m, t, task, rep, ps);
  lb.total = lb.marg + lb.amort + lb.pseudo;
  return lb;
}

Var diag_gaussian_kl(Var m1, Var s1, Var m2, Var s2) {
  Var var1 = square(s1);
  Var var2 = square(s2);
  Var term = log(s2) - log(s1) + (var1 + square(m1 - m2)) / (var2 * 2.0) - 0.5;
  return sum(term, -1);
}

Var loss_np_elbo(const Model& m, Tape& t, const TaskBatch& task, Rng& rng) {
  if (!models::has_latent(m.config().variant))
    throw std::runtime_error("loss_np_elbo: variant has no latent path");
  const i64 B = task.batch_size();
  const int h = m.config().d_hid;
  const Tensor full_mask = union_mask(task).astype(Dtype::F32);
  auto [m_all, s_all] = m.encode_latent(t, task, full_mask);
  auto [m_ctx, s_ctx] = m.encode_latent(t, task, task.ctx_mask);
  Tensor eps({B, 1, h}, t.dtype());
  for (i64 i = 0; i < eps.numel(); ++i) eps.set(i, rng.normal());
  FunctionRep rep = m.encode(t, task);
  models::DecodeInputs in = det_inputs(m, t, task, rep);
  in.latent = reshape(m_all, {B, 1, h}) + reshape(s_all, {B, 1, h}) * t.constant(eps);
  PredictiveOutput po = m.decode(t, in);
  Var ll = pointwise_ll(t.constant(task.y), po);
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));  // [B, 1]
  Var kl = diag_gaussian_kl(m_all, s_all, m_ctx, s_ctx);             // [B]
  return batch_mean(-reshape(sums, {B}) + kl);
}

Var loss_direct(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng) {
  if (!models::is_direct(m.config().variant))
    throw std::runtime_error("loss_direct: not a direct-generation variant");
  FunctionRep rep = m.encode(t, task);
  PseudoSet ps = m.generate_direct(t, rep, task, k_samples, rng);
  Model::DirectUnion u = m.encode_direct_union(t, task, ps);
  // marginal estimator at the task points
  models::DecodeInputs in;
  in.x = t.constant(task.x);
  in.rep = u.pooled;
  PredictiveOutput po = m.decode(t, in);
  Var ll = pointwise_ll(t.constant(task.y), po);
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));
  const double k_eff = static_cast<double>(sums.extent(-1));
  Var marg = batch_mean(-(logsumexp_lastdim(sums) - std::log(k_eff)));
  // amortization term over the union members themselves
  models::DecodeInputs in_u;
  in_u.x = u.x;
  in_u.rep = u.pooled;
  PredictiveOutput po_u = m.decode(t, in_u);
  Var ll_u = gaussian_log_density(u.y, po_u.mu, po_u.sigma);  // [B, K, n+g, d_y]
  Var masked = sum(ll_u, -1) * reshape(u.mask, {u.mask.extent(0), u.mask.extent(1),
                                                u.mask.extent(2)});
  Var sums_u = sum(masked, -1);  // [B, K]
  Var amort = batch_mean(-mean(sums_u, -1));
  return marg + amort;
}

Var loss_bootstrap(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng) {
  if (!models::is_bootstrap(m.config().variant))
    throw std::runtime_error("loss_bootstrap: not a bootstrap variant");
  FunctionRep rep = m.encode(t, task);
  PredictiveOutput po = m.predict_bootstrap(t, task, rep, k_samples, rng);
  Var ll = pointwise_ll(t.constant(task.y), po);
  Var sums = task_ll_sums(ll, mask_row_const(t, union_mask(task)));  // [B, K]
  return batch_mean(-mean(sums, -1));
}

Var training_loss(const Model& m, Tape& t, const TaskBatch& task, int k_samples, Rng& rng) {
  switch (m.config().variant) {
    case Variant::CNP:
    case Variant::CANP:
      return loss_amort(m, t, task);
    case Variant::NP:
    case Variant::ANP:
      return loss_np_elbo(m, t, task, rng);
    case Variant::MPNP:
    case Variant::MPANP:
      return loss_total(m, t, task, k_samples, rng).total;
    case Variant::BNP:
    case Variant::BANP:
      return loss_amort(m, t, task) + loss_bootstrap(m, t, task, k_samples, rng);
    case Variant::MPNP_DSI:
    case Variant::MPNP_DSE:
      return loss_direct(m, t, task, k_samples, rng);
  }
  throw std::logic_error("training_loss: unhandled variant");
}

EvalRecord eval_ll(const Model& m, ParamStore& params, const TaskBatch& task, int k_samples,
                   Rng& rng) {
  if (params.size() == 0) throw std::runtime_error("eval_ll: empty parameter store");
  Tape t(params.entries().begin()->second.dtype(), &params);
  const bool stochastic = models::is_stochastic(m.config().variant);
  const int k = stochastic ? k_samples : 1;
  PredictiveOutput po = m.predict(t, task, k, stochastic ? &rng : nullptr);
  const Tensor mu = po.mu.val();
  const Tensor sg = po.sigma.val();
  const i64 B = task.batch_size(), n = task.n_points();
  const i64 S = mu.extent(1);
  const int dy = m.config().d_y;
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  EvalRecord rec;
  rec.k_used = static_cast<int>(S);
  std::vector<double> lp(static_cast<std::size_t>(S));
  for (i64 b = 0; b < B; ++b) {
    double sum_ctx = 0, sum_tgt = 0;
    i64 n_ctx = 0, n_tgt = 0;
    for (i64 i = 0; i < n; ++i) {
      const bool in_ctx = task.ctx_mask.at(b * n + i) > 0.5;
      const bool in_tgt = task.tgt_mask.at(b * n + i) > 0.5;
      if (!in_ctx && !in_tgt) continue;
      for (i64 s = 0; s < S; ++s) {
        double acc = 0;
        for (int d = 0; d < dy; ++d) {
          const i64 off = ((b * S + s) * n + i) * dy + d;
          const double yv = task.y.at((b * n + i) * dy + d);
          const double z = (yv - mu.at(off)) / sg.at(off);
          acc += -kHalfLog2Pi - std::log(sg.at(off)) - 0.5 * z * z;
        }
        lp[static_cast<std::size_t>(s)] = acc;
      }
      // log-mean-exp over samples, max-shifted
      double mx = lp[0];
      for (i64 s = 1; s < S; ++s) mx = std::max(mx, lp[static_cast<std::size_t>(s)]);
      double se = 0;
      for (i64 s = 0; s < S; ++s) se += std::exp(lp[static_cast<std::size_t>(s)] - mx);
      const double point_ll = mx + std::log(se / static_cast<double>(S));
      if (in_ctx) {
        sum_ctx += point_ll;
        ++n_ctx;
      } else {
        sum_tgt += point_ll;
        ++n_tgt;
      }
    }
    const double c = n_ctx ? sum_ctx / static_cast<double>(n_ctx) : 0.0;
    const double tg = n_tgt ? sum_tgt / static_cast<double>(n_tgt) : 0.0;
    const double tk = (sum_ctx + sum_tgt) / static_cast<double>(n_ctx + n_tgt);
    rec.per_task_context.push_back(c);
    rec.per_task_target.push_back(tg);
    rec.per_task_task.push_back(tk);
    rec.context_ll += c;
    rec.target_ll += tg;
    rec.task_ll += tk;
  }
  rec.context_ll /= static_cast<double>(B);
  rec.target_ll /= static_cast<double>(B);
  rec.task_ll /= static_cast<double>(B);
  return rec;
}

}  // namespace npf::objectives
