#include "dualsc/attention.hpp"

#include <cmath>
#include <memory>

namespace dualsc {

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::post_ln: return "post_ln";
    case NormMode::pre_ln: return "pre_ln";
    case NormMode::qk_norm: return "qk_norm";
    case NormMode::adjust_qk_norm: return "adjust_qk_norm";
  }
  throw ParamError("unknown norm mode");
}

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "post_ln" || s == "post") return NormMode::post_ln;
  if (s == "pre_ln" || s == "pre") return NormMode::pre_ln;
  if (s == "qk_norm" || s == "qk") return NormMode::qk_norm;
  if (s == "adjust_qk_norm" || s == "adjust") return NormMode::adjust_qk_norm;
  throw ParamError("unknown norm mode '" + s + "' (expected post|pre|qk|adjust)");
}

bool uses_qk_scale(NormMode mode) {
  return mode == NormMode::qk_norm || mode == NormMode::adjust_qk_norm;
}

AttentionMask AttentionMask::full(std::size_t q, std::size_t k) {
  AttentionMask m;
  m.q_len = q;
  m.k_len = k;
  m.allowed.assign(q * k, 1);
  return m;
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m;
  m.q_len = n;
  m.k_len = n;
  m.allowed.assign(n * n, 0);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.allowed[q * n + k] = 1;
  return m;
}

namespace {

// y = c / max(||c||, eps) with c = x (plain) or x - mean(x) (centered).
// Centered slices that are all-constant have ||c|| < eps and map to zero.
Tensor normalize_impl(const Tensor& x, float eps, bool centered, const char* op_name) {
  if (eps <= 0.0f) throw ParamError("normalize eps must be > 0");
  const std::size_t d = x.shape().back();
  if (centered && d < 2) {
    throw ShapeError("zero_mean_unit_normalize needs last dim >= 2, got " + x.shape_str());
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto centered_vals = std::make_shared<std::vector<float>>(x.numel());
  auto inv_norms = std::make_shared<std::vector<float>>(rows);  // 0 marks a degenerate slice
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data().data() + r * d;
    double mean = 0.0;
    if (centered) {
      for (std::size_t j = 0; j < d; ++j) mean += xr[j];
      mean /= d;
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      (*centered_vals)[r * d + j] = static_cast<float>(c);
      sq += c * c;
    }
    const double norm = std::sqrt(sq);
    if (norm < eps) {
      (*inv_norms)[r] = 0.0f;
      for (std::size_t j = 0; j < d; ++j) out.data()[r * d + j] = 0.0f;
    } else {
      const float inv = static_cast<float>(1.0 / norm);
      (*inv_norms)[r] = inv;
      for (std::size_t j = 0; j < d; ++j)
        out.data()[r * d + j] = (*centered_vals)[r * d + j] * inv;
    }
  }

  bool needs_grad = Tape::active() && x.requires_grad();
  if (needs_grad) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record(op_name, out, [tx, to, centered_vals, inv_norms, rows, d, centered]() mutable {
      const auto& go = to.grad();
      const auto& y = to.data();
      auto& gx = tx.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const float inv = (*inv_norms)[r];
        if (inv == 0.0f) continue;  // degenerate slice, gradient defined as zero
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
        // dL/dc = inv * (g - y * <y,g>)
        double dc_mean = 0.0;
        std::vector<double> dc(d);
        for (std::size_t j = 0; j < d; ++j) {
          dc[j] = inv * (go[r * d + j] - y[r * d + j] * dot);
          dc_mean += dc[j];
        }
        dc_mean /= d;
        for (std::size_t j = 0; j < d; ++j) {
          const double v = centered ? dc[j] - dc_mean : dc[j];
          gx[r * d + j] += static_cast<float>(v);
        }
      }
    });
  }
  return out;
}

// scores[h] *= g[h] (or the shared g[0]); g is learnable.
Tensor scale_per_head(const Tensor& scores, const Tensor& g) {
  const std::size_t heads = scores.rank() == 3 ? scores.dim(0) : 1;
  if (g.numel() != heads && g.numel() != 1) {
    throw ShapeError("per-head scale size " + std::to_string(g.numel()) + " does not match " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t per = scores.numel() / heads;
  Tensor out = Tensor::zeros(scores.shape());
  const bool shared = g.numel() == 1;
  for (std::size_t h = 0; h < heads; ++h) {
    const float gh = g.data()[shared ? 0 : h];
    for (std::size_t i = 0; i < per; ++i)
      out.data()[h * per + i] = scores.data()[h * per + i] * gh;
  }
  if (Tape::active() && (scores.requires_grad() || g.requires_grad())) {
    out.set_requires_grad(true);
    Tensor ts = scores, tg = g, to = out;
    Tape::active()->record("scale_per_head", out, [ts, tg, to, heads, per, shared]() mutable {
      const auto& go = to.grad();
      if (ts.requires_grad()) {
        auto& gs = ts.grad();
        for (std::size_t h = 0; h < heads; ++h) {
          const float gh = tg.data()[shared ? 0 : h];
          for (std::size_t i = 0; i < per; ++i) gs[h * per + i] += go[h * per + i] * gh;
        }
      }
      if (tg.requires_grad()) {
        auto& gg = tg.grad();
        for (std::size_t h = 0; h < heads; ++h) {
          double acc = 0.0;
          for (std::size_t i = 0; i < per; ++i)
            acc += static_cast<double>(go[h * per + i]) * ts.data()[h * per + i];
          gg[shared ? 0 : h] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

constexpr float kMaskValue = -1e9f;

}  // namespace

Tensor zero_mean_unit_normalize(const Tensor& x, float eps) {
  return normalize_impl(x, eps, true, "zero_mean_unit_normalize");
}

Tensor l2_normalize_lastdim(const Tensor& x, float eps) {
  return normalize_impl(x, eps, false, "l2_normalize_lastdim");
}

AttentionResult attention(NormMode mode, const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& g, const AttentionMask& mask) {
  if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3)) {
    throw ShapeError("attention expects rank 2 or 3 q/k/v, got " + q.shape_str() + ", " +
                     k.shape_str() + ", " + v.shape_str());
  }
  const std::size_t r = q.rank();
  const std::size_t d = q.dim(r - 1);
  if (k.dim(r - 1) != d || v.dim(r - 1) != d) {
    throw ShapeError("attention head dims disagree: " + q.shape_str() + ", " + k.shape_str() +
                     ", " + v.shape_str());
  }
  const std::size_t q_len = q.dim(r - 2);
  const std::size_t k_len = k.dim(r - 2);
  if (v.dim(r - 2) != k_len) {
    throw ShapeError("attention key/value length mismatch: " + k.shape_str() + " vs " +
                     v.shape_str());
  }
  const std::size_t heads = r == 3 ? q.dim(0) : 1;
  if (r == 3 && (k.dim(0) != heads || v.dim(0) != heads)) {
    throw ShapeError("attention head count mismatch");
  }
  if (mask.q_len != q_len || mask.k_len != k_len) {
    throw ShapeError("attention mask is " + std::to_string(mask.q_len) + "x" +
                     std::to_string(mask.k_len) + " but scores are " + std::to_string(q_len) +
                     "x" + std::to_string(k_len));
  }

  constexpr float kNormEps = 1e-6f;
  Tensor scores;
  switch (mode) {
    case NormMode::post_ln:
    case NormMode::pre_ln: {
      scores = scale(matmul(q, transpose_last2(k)), 1.0f / std::sqrt(static_cast<float>(d)));
      break;
    }
    case NormMode::qk_norm:
    case NormMode::adjust_qk_norm: {
      if (!g.defined()) {
        throw ParamError("attention mode " + to_string(mode) + " requires the learnable scale g");
      }
      const bool centered = mode == NormMode::adjust_qk_norm;
      Tensor qn = normalize_impl(q, kNormEps, centered,
                                 centered ? "zero_mean_unit_normalize" : "l2_normalize_lastdim");
      Tensor kn = normalize_impl(k, kNormEps, centered,
                                 centered ? "zero_mean_unit_normalize" : "l2_normalize_lastdim");
      scores = scale_per_head(matmul(qn, transpose_last2(kn)), g);
      break;
    }
  }

  // Masked positions get a large negative bias; the cosine-style logits are
  // bounded by |g| so -1e9 always dominates.
  bool any_masked = false;
  for (std::uint8_t a : mask.allowed) {
    if (!a) {
      any_masked = true;
      break;
    }
  }
  if (any_masked) {
    Tensor bias = Tensor::zeros(scores.shape());
    const std::size_t per = q_len * k_len;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < per; ++i)
        if (!mask.allowed[i]) bias.data()[h * per + i] = kMaskValue;
    scores = add(scores, bias);
  }

  AttentionResult res;
  res.weights = softmax_lastdim(scores);
  res.output = matmul(res.weights, v);
  return res;
}

}  // namespace dualsc
