#include "npf/setnn.hpp"

#include <cmath>
#include <stdexcept>

namespace npf::setnn {

void init_linear(ParamStore& ps, const std::string& name, int d_in, int d_out, Rng& rng) {
  Tensor w({d_in, d_out}, Dtype::F32);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  auto data = w.data<float>();
  for (auto& v : data) v = static_cast<float>(rng.uniform(-bound, bound));
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Tensor::zeros({d_out}, Dtype::F32));
}

void init_mlp(ParamStore& ps, const std::string& prefix, const MLPSpec& spec, Rng& rng) {
  if (spec.n_layers < 2)
    throw std::invalid_argument("mlp: need at least 2 layers, got " +
                                std::to_string(spec.n_layers));
  for (int l = 0; l < spec.n_layers; ++l) {
    const int din = l == 0 ? spec.d_in : spec.d_hid;
    const int dout = l == spec.n_layers - 1 ? spec.d_out : spec.d_hid;
    init_linear(ps, prefix + ".l" + std::to_string(l), din, dout, rng);
  }
}

void init_layer_norm(ParamStore& ps, const std::string& name, int dim) {
  ps.add(name + ".weight", Tensor::full({dim}, 1.0, Dtype::F32));
  ps.add(name + ".bias", Tensor::zeros({dim}, Dtype::F32));
}

void init_mha(ParamStore& ps, const std::string& prefix, int d_q, int d_k, int d_v,
              const MHASpec& spec, Rng& rng) {
  if (spec.d_out % spec.n_head != 0)
    throw std::invalid_argument("mha: d_out " + std::to_string(spec.d_out) +
                                " not divisible by n_head " + std::to_string(spec.n_head));
  init_linear(ps, prefix + ".wq", d_q, spec.d_out, rng);
  init_linear(ps, prefix + ".wk", d_k, spec.d_out, rng);
  init_linear(ps, prefix + ".wv", d_v, spec.d_out, rng);
  init_layer_norm(ps, prefix + ".ln1", spec.d_out);
  init_linear(ps, prefix + ".ff", spec.d_out, spec.d_out, rng);
  init_layer_norm(ps, prefix + ".ln2", spec.d_out);
}

void init_isab(ParamStore& ps, const std::string& prefix, int d_x, int d_cond,
               const ISABSpec& spec, Rng& rng) {
  if (spec.mode == IsabCond::Learned) {
    if (spec.n_inducing < 1) throw std::invalid_argument("isab: learned mode needs n_inducing >= 1");
    Tensor ind({spec.n_inducing, spec.d_out}, Dtype::F32);
    auto data = ind.data<float>();
    for (auto& v : data) v = static_cast<float>(rng.normal());
    ps.add(prefix + ".ind", std::move(ind));
    d_cond = spec.d_out;
  }
  MHASpec inner{spec.n_head, spec.d_out, spec.per_head_scale};
  init_mha(ps, prefix + ".mab1", d_cond, d_x, d_x, inner, rng);
  init_mha(ps, prefix + ".mab2", d_x, spec.d_out, spec.d_out, inner, rng);
}

Var linear(Tape& t, const std::string& name, Var x) {
  return matmul(x, t.param(name + ".weight")) + t.param(name + ".bias");
}

Var mlp(Tape& t, const std::string& prefix, const MLPSpec& spec, Var x) {
  if (x.extent(-1) != spec.d_in)
    throw std::runtime_error("mlp: input dim " + std::to_string(x.extent(-1)) +
                             " does not match spec d_in " + std::to_string(spec.d_in) + " at '" +
                             prefix + "'");
  Var h = x;
  for (int l = 0; l < spec.n_layers; ++l) {
    h = linear(t, prefix + ".l" + std::to_string(l), h);
    if (l < spec.n_layers - 1) h = relu(h);
  }
  return h;
}

namespace {

Var layer_norm_affine(Tape& t, const std::string& name, Var x) {
  return layer_norm_lastdim(x) * t.param(name + ".weight") + t.param(name + ".bias");
}

// mask [.., n_kv] -> additive logit mask [.., 1, n_kv] with -1e9 on zeros
Var logit_mask(Var mask) {
  Shape ms = mask.shape();
  ms.insert(ms.end() - 1, 1);
  return reshape((mask - 1.0) * 1e9, ms);
}

}  // namespace

Var mha(Tape& t, const std::string& prefix, const MHASpec& spec, Var q, Var k, Var v,
        Var key_mask, const KvPair* extra) {
  if (k.extent(-2) != v.extent(-2))
    throw std::runtime_error("mha: key set size " + std::to_string(k.extent(-2)) +
                             " != value set size " + std::to_string(v.extent(-2)) + " at '" +
                             prefix + "'");
  i64 n_kv = k.extent(-2);
  if (extra) n_kv += extra->k.extent(-2);
  if (n_kv == 0)
    throw std::runtime_error("mha: empty key/value set at '" + prefix +
                             "' (attention undefined)");
  Var qp = linear(t, prefix + ".wq", q);
  Var kp = linear(t, prefix + ".wk", k);
  Var vp = linear(t, prefix + ".wv", v);
  Var mask = key_mask;
  if (extra) {
    // project separately, then set-concatenate: identical to attention over
    // the concatenated sets since the maps are pointwise
    Var kp2 = linear(t, prefix + ".wk", extra->k);
    Var vp2 = linear(t, prefix + ".wv", extra->v);
    Shape lead = kp2.shape();  // broadcast real kv over pseudo-sample axes
    lead[lead.size() - 2] = kp.extent(-2);
    kp = concat({broadcast_to(kp, lead), kp2}, -2);
    vp = concat({broadcast_to(vp, lead), vp2}, -2);
    if (key_mask.valid() || extra->mask.valid()) {
      Var m1 = key_mask;
      if (!m1.valid()) m1 = t.constant(Tensor::full({k.extent(-2)}, 1.0, t.dtype()));
      Var m2 = extra->mask;
      if (!m2.valid()) m2 = t.constant(Tensor::full({extra->k.extent(-2)}, 1.0, t.dtype()));
      Shape mlead(lead.begin(), lead.end() - 1);
      Shape m2lead = mlead;
      m2lead[m2lead.size() - 1] = extra->k.extent(-2);
      mask = concat({broadcast_to(m1, mlead), broadcast_to(m2, m2lead)}, -1);
    }
  }
  const int H = spec.n_head;
  const i64 dh = spec.d_out / H;
  const double scale =
      1.0 / std::sqrt(static_cast<double>(spec.per_head_scale ? dh : spec.d_out));
  Var lmask;
  if (mask.valid()) lmask = logit_mask(mask);
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) {
    Var qh = slice(qp, -1, h * dh, dh);
    Var kh = slice(kp, -1, h * dh, dh);
    Var vh = slice(vp, -1, h * dh, dh);
    Var logits = matmul(qh, kh, /*transpose_rhs=*/true) * scale;
    if (lmask.valid()) logits = logits + lmask;
    heads.push_back(matmul(softmax_lastdim(logits), vh));
  }
  Var att = concat(heads, -1);
  Var o = layer_norm_affine(t, prefix + ".ln1", qp + att);
  return layer_norm_affine(t, prefix + ".ln2", o + relu(linear(t, prefix + ".ff", o)));
}

Var sa(Tape& t, const std::string& prefix, const MHASpec& spec, Var x, Var mask) {
  return mha(t, prefix, spec, x, x, x, mask);
}

Var mab(Tape& t, const std::string& prefix, const MHASpec& spec, Var x, Var y, Var y_mask) {
  return mha(t, prefix, spec, x, y, y, y_mask);
}

Var isab(Tape& t, const std::string& prefix, const ISABSpec& spec, Var x, Var cond, Var cond_mask,
         Var x_mask) {
  MHASpec inner{spec.n_head, spec.d_out, spec.per_head_scale};
  Var inducing = cond;
  if (spec.mode == IsabCond::Learned) {
    inducing = t.param(prefix + ".ind");
    cond_mask = {};
  } else if (!inducing.valid() || inducing.extent(-2) == 0) {
    throw std::runtime_error("isab: supplied conditioning set is empty at '" + prefix + "'");
  }
  if (x.extent(-2) == 0) {
    Shape os = x.shape();
    os[os.size() - 1] = spec.d_out;
    return t.constant(Tensor::zeros(os, t.dtype()));
  }
  Var h = mab(t, prefix + ".mab1", inner, inducing, x, x_mask);
  return mab(t, prefix + ".mab2", inner, x, h, cond_mask);
}

}  // namespace npf::setnn
