#include "npf/models.hpp"

#include <algorithm>
#include <stdexcept>

namespace npf::models {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::CNP: return "cnp";
    case Variant::NP: return "np";
    case Variant::CANP: return "canp";
    case Variant::ANP: return "anp";
    case Variant::BNP: return "bnp";
    case Variant::BANP: return "banp";
    case Variant::MPNP: return "mpnp";
    case Variant::MPANP: return "mpanp";
    case Variant::MPNP_DSI: return "mpnp-dsi";
    case Variant::MPNP_DSE: return "mpnp-dse";
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  for (Variant v : {Variant::CNP, Variant::NP, Variant::CANP, Variant::ANP, Variant::BNP,
                    Variant::BANP, Variant::MPNP, Variant::MPANP, Variant::MPNP_DSI,
                    Variant::MPNP_DSE}) {
    if (name == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

bool is_attentive(Variant v) {
  return v == Variant::CANP || v == Variant::ANP || v == Variant::BANP || v == Variant::MPANP;
}
bool has_latent(Variant v) { return v == Variant::NP || v == Variant::ANP; }
bool is_mp(Variant v) { return v == Variant::MPNP || v == Variant::MPANP; }
bool is_direct(Variant v) { return v == Variant::MPNP_DSI || v == Variant::MPNP_DSE; }
bool is_bootstrap(Variant v) { return v == Variant::BNP || v == Variant::BANP; }
bool is_stochastic(Variant v) { return v != Variant::CNP && v != Variant::CANP; }

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg_.d_hid % cfg_.n_head != 0)
    throw std::invalid_argument("model: d_hid must be divisible by n_head");
  if (cfg_.K < 1 && is_stochastic(cfg_.variant))
    throw std::invalid_argument("model: K >= 1 required for stochastic variants");
  if (cfg_.n_gen < 0) throw std::invalid_argument("model: n_gen must be >= 0");
}

setnn::MLPSpec Model::det_spec() const {
  return {5, cfg_.d_x + cfg_.d_y, cfg_.d_hid, cfg_.d_hid};
}
setnn::MLPSpec Model::lat_spec() const {
  return {2, cfg_.d_x + cfg_.d_y, cfg_.d_hid, 2 * cfg_.d_hid};
}
setnn::MLPSpec Model::qk_spec() const { return {5, cfg_.d_x, cfg_.d_hid, cfg_.d_hid}; }
int Model::dec_d_in() const {
  return cfg_.d_x + (has_latent(cfg_.variant) ? 2 * cfg_.d_hid : cfg_.d_hid);
}
setnn::MLPSpec Model::dec_spec() const { return {3, dec_d_in(), cfg_.d_hid, cfg_.d_y + 1}; }
setnn::MHASpec Model::att_spec(int d_out) const {
  return {cfg_.n_head, d_out, cfg_.per_head_scale};
}

int Model::direct_gen_heads() const {
  const int dz = cfg_.d_x + cfg_.d_y;
  for (int h = std::min(cfg_.n_head, dz); h >= 1; --h)
    if (dz % h == 0) return h;
  return 1;
}

ParamStore Model::init_params(std::uint64_t seed) const {
  ParamStore ps(seed);
  Rng rng = Rng(seed).fork(0x9a9a);
  const Variant v = cfg_.variant;
  const int h = cfg_.d_hid;
  if (!is_attentive(v)) setnn::init_mlp(ps, "enc.det", det_spec(), rng);
  if (has_latent(v)) setnn::init_mlp(ps, "enc.lat", lat_spec(), rng);
  if (v == Variant::ANP) setnn::init_mha(ps, "enc.lat_sa", 2 * h, 2 * h, 2 * h, att_spec(2 * h), rng);
  if (is_attentive(v)) {
    setnn::init_mlp(ps, "enc.qk", qk_spec(), rng);
    setnn::init_mlp(ps, "enc.v", det_spec(), rng);
    setnn::init_mha(ps, "enc.sa", h, h, h, att_spec(h), rng);
    setnn::init_mha(ps, "enc.cross", h, h, h, att_spec(h), rng);
  }
  if (v == Variant::MPNP) {
    setnn::ISABSpec gen{cfg_.n_head, h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    setnn::init_isab(ps, "gen", /*d_x=*/h, /*d_cond=*/h, gen, rng);
  } else if (v == Variant::MPANP) {
    setnn::ISABSpec gen{cfg_.n_head, 2 * h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    setnn::init_isab(ps, "gen", 2 * h, 2 * h, gen, rng);
  } else if (v == Variant::MPNP_DSI) {
    const int dz = cfg_.d_x + cfg_.d_y;
    setnn::ISABSpec gen{direct_gen_heads(), dz, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    setnn::init_isab(ps, "gen", dz, dz, gen, rng);
  } else if (v == Variant::MPNP_DSE) {
    setnn::ISABSpec gen{cfg_.n_head, h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    setnn::init_isab(ps, "gen", h, cfg_.d_x + cfg_.d_y, gen, rng);
    setnn::init_linear(ps, "gen.out", h, cfg_.d_x, rng);
  }
  if (is_bootstrap(v)) setnn::init_linear(ps, "adapt", h, cfg_.d_x + h, rng);
  setnn::init_mlp(ps, "dec", dec_spec(), rng);
  return ps;
}

namespace {

Tensor context_counts(const TaskBatch& task) {
  const i64 B = task.batch_size();
  Tensor c({B, 1}, Dtype::F64);
  for (i64 b = 0; b < B; ++b) {
    const i64 n = task.context_count(b);
    if (n == 0)
      throw std::runtime_error("encode: task " + std::to_string(b) + " has an empty context");
    c.set(b, static_cast<double>(n));
  }
  return c;
}

Tensor mask_counts(const Tensor& mask) {
  const i64 B = mask.extent(0), n = mask.extent(1);
  Tensor c({B, 1}, Dtype::F64);
  for (i64 b = 0; b < B; ++b) {
    double s = 0;
    for (i64 j = 0; j < n; ++j) s += mask.at(b * n + j);
    c.set(b, s);
  }
  return c;
}

}  // namespace

Var Model::pooled_mean(Tape& t, Var per_point, Var mask_row, Var counts) const {
  const i64 B = per_point.extent(0), n = per_point.extent(1), h = per_point.extent(2);
  Var mask3 = reshape(mask_row, {B, n, 1});
  Var summed = sum(per_point * mask3, 1);           // [B, h]
  Var mean_rep = summed / counts;                   // counts [B, 1]
  return reshape(mean_rep, {B, 1, h});
}

FunctionRep Model::encode(Tape& t, const TaskBatch& task) const {
  FunctionRep rep;
  const i64 B = task.batch_size(), n = task.n_points(), h = cfg_.d_hid;
  Var x = t.constant(task.x);
  Var y = t.constant(task.y);
  rep.ctx_mask = t.constant(task.ctx_mask);
  rep.counts = t.constant(context_counts(task));
  Var z = concat({x, y}, -1);
  if (!is_attentive(cfg_.variant)) {
    rep.per_point = setnn::mlp(t, "enc.det", det_spec(), z);
    rep.pooled = pooled_mean(t, rep.per_point, rep.ctx_mask, rep.counts);
  } else {
    rep.r_q = setnn::mlp(t, "enc.qk", qk_spec(), x);
    // value path: pointwise pair reps, then self-attention over the context
    rep.per_point = setnn::mlp(t, "enc.v", det_spec(), z);
    rep.r_v = setnn::sa(t, "enc.sa", att_spec(h), rep.per_point, rep.ctx_mask);
    Var q4 = reshape(rep.r_q, {B, 1, n, h});
    Var v4 = reshape(rep.r_v, {B, 1, n, h});
    Var mask_row = reshape(rep.ctx_mask, {B, 1, n});
    rep.cross = setnn::mha(t, "enc.cross", att_spec(h), q4, q4, v4, mask_row);
  }
  return rep;
}

std::pair<Var, Var> Model::encode_latent(Tape& t, const TaskBatch& task,
                                         const Tensor& subset_mask) const {
  if (!has_latent(cfg_.variant))
    throw std::runtime_error("encode_latent: variant has no latent path");
  const i64 B = task.batch_size(), n = task.n_points(), h = cfg_.d_hid;
  Var x = t.constant(task.x);
  Var y = t.constant(task.y);
  Var z = concat({x, y}, -1);
  Var mask = t.constant(subset_mask);
  Var counts = t.constant(mask_counts(subset_mask));
  Var hp = setnn::mlp(t, "enc.lat", lat_spec(), z);  // [B, n, 2h]
  if (cfg_.variant == Variant::ANP) hp = setnn::sa(t, "enc.lat_sa", att_spec(2 * h), hp, mask);
  Var pooled = reshape(pooled_mean(t, hp, mask, counts), {B, 2 * h});
  Var m = slice(pooled, -1, 0, h);
  Var s = slice(pooled, -1, h, h) ;
  return {m, softplus(s) * 0.9 + 0.1};
}

Tensor sample_eps(i64 batch, int k, int g, int dim, Rng& rng, Dtype dt) {
  Tensor eps({batch, k, g, dim}, dt);
  for (i64 i = 0; i < eps.numel(); ++i) eps.set(i, rng.normal());
  return eps;
}

PseudoSet Model::generate_pseudo(Tape& t, const FunctionRep& rep, int k_samples, Rng& rng) const {
  if (!is_mp(cfg_.variant))
    throw std::runtime_error("generate_pseudo: not a martingale-posterior variant");
  PseudoSet ps;
  ps.k = k_samples;
  ps.n_gen = cfg_.n_gen;
  if (cfg_.n_gen == 0) return ps;  // empty pseudo set is valid
  const i64 B = rep.ctx_mask.extent(0), n = rep.ctx_mask.extent(1);
  const int h = cfg_.d_hid;
  Var mask_row = reshape(rep.ctx_mask, {B, 1, n});
  if (cfg_.variant == Variant::MPNP) {
    ps.eps = t.constant(sample_eps(B, k_samples, cfg_.n_gen, h, rng, t.dtype()));
    setnn::ISABSpec gen{cfg_.n_head, h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    Var cond = reshape(rep.per_point, {B, 1, n, h});
    ps.reps = setnn::isab(t, "gen", gen, ps.eps, cond, mask_row);
  } else {
    ps.eps = t.constant(sample_eps(B, k_samples, cfg_.n_gen, 2 * h, rng, t.dtype()));
    setnn::ISABSpec gen{cfg_.n_head, 2 * h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    Var cond = reshape(concat({rep.r_q, rep.r_v}, -1), {B, 1, n, 2 * h});
    Var out = setnn::isab(t, "gen", gen, ps.eps, cond, mask_row);
    ps.keys = slice(out, -1, 0, h);
    ps.values = slice(out, -1, h, h);
  }
  return ps;
}

FunctionRep Model::amortize(Tape& t, const FunctionRep& rep, const PseudoSet& pseudo,
                            bool include_real) const {
  FunctionRep out = rep;
  if (pseudo.n_gen == 0) {
    if (!include_real) throw std::runtime_error("amortize: empty pseudo set without real context");
    return out;
  }
  const int h = cfg_.d_hid;
  if (cfg_.variant == Variant::MPNP) {
    Var sum_pseudo = sum(pseudo.reps, 2);  // [B, K, h]
    const i64 B = sum_pseudo.extent(0);
    Var counts3 = reshape(rep.counts, {B, 1, 1});
    if (include_real) {
      Var sum_real = rep.pooled * counts3;  // undo the mean, [B, 1, h]
      out.pooled = (sum_real + sum_pseudo) / (counts3 + static_cast<double>(pseudo.n_gen));
    } else {
      out.pooled = sum_pseudo * (1.0 / static_cast<double>(pseudo.n_gen));
    }
  } else if (cfg_.variant == Variant::MPANP) {
    const i64 B = rep.r_q.extent(0), n = rep.r_q.extent(1);
    Var q4 = reshape(rep.r_q, {B, 1, n, h});
    Var v4 = reshape(rep.r_v, {B, 1, n, h});
    Var mask_row = reshape(rep.ctx_mask, {B, 1, n});
    if (include_real) {
      setnn::KvPair extra{pseudo.keys, pseudo.values, {}};
      out.cross = setnn::mha(t, "enc.cross", att_spec(h), q4, q4, v4, mask_row, &extra);
    } else {
      out.cross = setnn::mha(t, "enc.cross", att_spec(h), q4, pseudo.keys, pseudo.values);
    }
  } else {
    throw std::runtime_error("amortize: not a martingale-posterior variant");
  }
  return out;
}

PredictiveOutput Model::decode(Tape& t, const DecodeInputs& in) const {
  const int h = cfg_.d_hid;
  const int dx = cfg_.d_x;
  Var w0 = t.param("dec.l0.weight");
  Var b0 = t.param("dec.l0.bias");
  // split of the first-layer weight over the concatenated input
  // [x ; rep ; latent]: applying the parts separately and adding is exactly
  // the linear map of the concatenation
  Var xpart = matmul(in.x, slice(w0, 0, 0, dx));
  if (xpart.rank() == 3) {
    Shape s = xpart.shape();
    xpart = reshape(xpart, {s[0], 1, s[1], s[2]});
  }
  Var rpart = matmul(in.rep, slice(w0, 0, dx, h));
  if (rpart.rank() == 3) {
    Shape s = rpart.shape();  // [B, S, h] -> [B, S, 1, h]
    rpart = reshape(rpart, {s[0], s[1], 1, s[2]});
  }
  Var z1 = xpart + rpart + b0;
  if (in.latent.valid()) {
    Var lpart = matmul(in.latent, slice(w0, 0, dx + h, h));
    Shape s = lpart.shape();
    z1 = z1 + reshape(lpart, {s[0], s[1], 1, s[2]});
  }
  if (in.extra_full.valid()) {
    Var epart = matmul(in.extra_full, w0);
    if (epart.rank() == 3) {
      Shape s = epart.shape();
      epart = reshape(epart, {s[0], s[1], 1, s[2]});
    }
    z1 = z1 + epart;
  }
  Var h1 = relu(z1);
  Var h2 = relu(setnn::linear(t, "dec.l1", h1));
  Var outp = setnn::linear(t, "dec.l2", h2);  // [B, S, n, d_y + 1]
  PredictiveOutput po;
  po.mu = slice(outp, -1, 0, cfg_.d_y);
  Var sraw = slice(outp, -1, cfg_.d_y, 1);
  po.sigma = broadcast_to(softplus(sraw) * 0.9 + 0.1, po.mu.shape());
  po.stochastic = is_stochastic(cfg_.variant);
  return po;
}

std::vector<i64> Model::bootstrap_indices(const TaskBatch& task, i64 b, Rng& rng) const {
  const i64 n = task.n_points();
  std::vector<i64> ctx = task.context_indices(b);
  if (ctx.empty()) throw std::runtime_error("bootstrap: task has an empty context");
  std::vector<i64> idx(static_cast<std::size_t>(n));
  for (i64 j = 0; j < n; ++j) idx[static_cast<std::size_t>(j)] = j;
  for (i64 j : ctx)
    idx[static_cast<std::size_t>(j)] = ctx[rng.uniform_int(ctx.size())];
  return idx;
}

PredictiveOutput Model::predict_bootstrap(Tape& t, const TaskBatch& task, const FunctionRep& rep,
                                          int k_samples, Rng& rng) const {
  const i64 B = task.batch_size(), n = task.n_points();
  const int h = cfg_.d_hid;
  std::vector<i64> idx;
  idx.reserve(static_cast<std::size_t>(B * k_samples * n));
  for (i64 b = 0; b < B; ++b)
    for (int k = 0; k < k_samples; ++k) {
      auto one = bootstrap_indices(task, b, rng);
      idx.insert(idx.end(), one.begin(), one.end());
    }
  const Shape idx_shape{B, k_samples, n};
  Var x = t.constant(task.x);
  Var mask_row = reshape(rep.ctx_mask, {B, 1, n});
  DecodeInputs in;
  in.x = x;
  if (cfg_.variant == Variant::BNP) {
    Var y = t.constant(task.y);
    Var z = concat({x, y}, -1);
    Var zb = gather_rows(z, idx, idx_shape);                       // [B, K, n, d_z]
    Var rb = setnn::mlp(t, "enc.det", det_spec(), zb);             // [B, K, n, h]
    Var mask4 = reshape(rep.ctx_mask, {B, 1, n, 1});
    Var counts3 = reshape(rep.counts, {B, 1, 1});
    Var pooled_b = sum(rb * mask4, 2) / counts3;                   // [B, K, h]
    in.rep = rep.pooled;
    in.extra_full = setnn::linear(t, "adapt", pooled_b);           // [B, K, d_x + h]
  } else {
    Var kb = gather_rows(rep.r_q, idx, idx_shape);                 // resampled keys
    Var vb_pre = gather_rows(rep.per_point, idx, idx_shape);
    Var vb = setnn::sa(t, "enc.sa", att_spec(h), vb_pre, mask_row);
    Var q4 = reshape(rep.r_q, {B, 1, n, h});
    Var cross_b = setnn::mha(t, "enc.cross", att_spec(h), q4, kb, vb, mask_row);
    in.rep = rep.cross;
    in.extra_full = setnn::linear(t, "adapt", cross_b);            // [B, K, n, d_x + h]
  }
  return decode(t, in);
}

PseudoSet Model::generate_direct(Tape& t, const FunctionRep& rep, const TaskBatch& task,
                                 int k_samples, Rng& rng) const {
  if (!is_direct(cfg_.variant))
    throw std::runtime_error("generate_direct: not a direct-generation variant");
  PseudoSet ps;
  ps.k = k_samples;
  ps.n_gen = cfg_.n_gen;
  if (cfg_.n_gen == 0) return ps;
  const i64 B = task.batch_size(), n = task.n_points();
  const int h = cfg_.d_hid, dx = cfg_.d_x, dy = cfg_.d_y, dz = dx + dy;
  Var x = t.constant(task.x);
  Var y = t.constant(task.y);
  Var z4 = reshape(concat({x, y}, -1), {B, 1, n, dz});
  Var mask_row = reshape(rep.ctx_mask, {B, 1, n});
  if (cfg_.variant == Variant::MPNP_DSI) {
    ps.eps = t.constant(sample_eps(B, k_samples, cfg_.n_gen, dz, rng, t.dtype()));
    setnn::ISABSpec gen{direct_gen_heads(), dz, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    Var u = setnn::isab(t, "gen", gen, ps.eps, z4, mask_row);
    ps.x = slice(u, -1, 0, dx);
    ps.y = slice(u, -1, dx, dy);
  } else {
    ps.eps = t.constant(sample_eps(B, k_samples, cfg_.n_gen, h, rng, t.dtype()));
    setnn::ISABSpec gen{cfg_.n_head, h, setnn::IsabCond::Supplied, 0};
    gen.per_head_scale = cfg_.per_head_scale;
    Var u = setnn::isab(t, "gen", gen, ps.eps, z4, mask_row);
    ps.x = setnn::linear(t, "gen.out", u);  // [B, K, g, d_x]
    DecodeInputs din;
    din.x = ps.x;
    din.rep = rep.pooled;
    PredictiveOutput po = decode(t, din);  // model's own predictive at x'
    Tensor zeta = sample_eps(B, k_samples, cfg_.n_gen, dy, rng, t.dtype());
    ps.y = po.mu + po.sigma * t.constant(zeta);
  }
  return ps;
}

Model::DirectUnion Model::encode_direct_union(Tape& t, const TaskBatch& task,
                                              const PseudoSet& pseudo) const {
  const i64 B = task.batch_size(), n = task.n_points();
  const int h = cfg_.d_hid, dx = cfg_.d_x, dy = cfg_.d_y;
  const int K = pseudo.k, g = pseudo.n_gen;
  Var x4 = broadcast_to(reshape(t.constant(task.x), {B, 1, n, dx}), {B, K, n, dx});
  Var y4 = broadcast_to(reshape(t.constant(task.y), {B, 1, n, dy}), {B, K, n, dy});
  DirectUnion u;
  if (g == 0) {
    u.x = x4;
    u.y = y4;
    u.mask = broadcast_to(reshape(t.constant(task.ctx_mask), {B, 1, n, 1}), {B, K, n, 1});
  } else {
    u.x = concat({x4, pseudo.x}, 2);
    u.y = concat({y4, pseudo.y}, 2);
    Var cmask = broadcast_to(reshape(t.constant(task.ctx_mask), {B, 1, n, 1}), {B, K, n, 1});
    Var ones = t.constant(Tensor::full({B, K, g, 1}, 1.0, t.dtype()));
    u.mask = concat({cmask, ones}, 2);
  }
  Var zu = concat({u.x, u.y}, -1);
  Var ru = setnn::mlp(t, "enc.det", det_spec(), zu);  // [B, K, n+g, h]
  Var counts3 = reshape(t.constant(context_counts(task)), {B, 1, 1});
  u.pooled = sum(ru * u.mask, 2) / (counts3 + static_cast<double>(g));
  return u;
}

PredictiveOutput Model::predict(Tape& t, const TaskBatch& task, int k_samples, Rng* rng) const {
  const Variant v = cfg_.variant;
  if (is_stochastic(v) && rng == nullptr)
    throw std::runtime_error("predict: rng required for stochastic variant " +
                             std::string(variant_name(v)));
  if (is_stochastic(v) && k_samples < 1)
    throw std::runtime_error("predict: K >= 1 required");
  FunctionRep rep = encode(t, task);
  const i64 B = task.batch_size();
  const int h = cfg_.d_hid;
  DecodeInputs in;
  in.x = t.constant(task.x);
  switch (v) {
    case Variant::CNP:
      in.rep = rep.pooled;
      break;
    case Variant::CANP:
      in.rep = rep.cross;
      break;
    case Variant::NP:
    case Variant::ANP: {
      auto [m, s] = encode_latent(t, task, task.ctx_mask);
      Tensor epsv({B, k_samples, h}, t.dtype());
      for (i64 i = 0; i < epsv.numel(); ++i) epsv.set(i, rng->normal());
      Var mm = reshape(m, {B, 1, h});
      Var ss = reshape(s, {B, 1, h});
      in.latent = mm + ss * t.constant(epsv);  // [B, K, h]
      in.rep = v == Variant::NP ? rep.pooled : rep.cross;
      break;
    }
    case Variant::MPNP:
    case Variant::MPANP: {
      PseudoSet ps = generate_pseudo(t, rep, k_samples, *rng);
      FunctionRep rep2 = amortize(t, rep, ps, /*include_real=*/true);
      in.rep = v == Variant::MPNP ? rep2.pooled : rep2.cross;
      break;
    }
    case Variant::BNP:
    case Variant::BANP:
      return predict_bootstrap(t, task, rep, k_samples, *rng);
    case Variant::MPNP_DSI:
    case Variant::MPNP_DSE: {
      PseudoSet ps = generate_direct(t, rep, task, k_samples, *rng);
      if (ps.n_gen == 0) {
        in.rep = rep.pooled;
      } else {
        DirectUnion u = encode_direct_union(t, task, ps);
        in.rep = u.pooled;
      }
      break;
    }
  }
  return decode(t, in);
}

}  // namespace npf::models
