#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualsc/tensor.hpp"

namespace dualsc {

// The four attention-score/normalization variants. post_ln and pre_ln use
// scaled dot-product scores and differ only in residual placement; qk_norm
// scores by the cosine of L2-normalized Q and K times a learnable g;
// adjust_qk_norm additionally removes the per-slice mean before normalizing.
enum class NormMode { post_ln, pre_ln, qk_norm, adjust_qk_norm };

std::string to_string(NormMode mode);
// Accepts both long names ("adjust_qk_norm") and CLI short names ("adjust").
NormMode norm_mode_from_string(const std::string& s);
bool uses_qk_scale(NormMode mode);

// Boolean attendability matrix, true = key position visible to the query.
struct AttentionMask {
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::vector<std::uint8_t> allowed;  // row-major q_len x k_len

  static AttentionMask full(std::size_t q, std::size_t k);
  static AttentionMask causal(std::size_t n);

  bool at(std::size_t q, std::size_t k) const { return allowed[q * k_len + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { allowed[q * k_len + k] = v ? 1 : 0; }
};

// Removes the per-slice mean then L2-normalizes, so each last-dim slice sums
// to 0 and has unit norm. All-constant slices map to the zero vector.
Tensor zero_mean_unit_normalize(const Tensor& x, float eps);

// Plain per-slice L2 normalization (the qk_norm variant, no centering).
Tensor l2_normalize_lastdim(const Tensor& x, float eps);

struct AttentionResult {
  Tensor output;   // same shape as v
  Tensor weights;  // [.., q_len, k_len], rows sum to 1
};

// q, k, v: rank 2 [len, d] (single head) or rank 3 [heads, len, d].
// g: per-head scale, required (numel == heads, or 1 = shared) for the qk
// modes and ignored otherwise. Masked positions receive -1e9 before softmax.
AttentionResult attention(NormMode mode, const Tensor& q, const Tensor& k, const Tensor& v,
                          const Tensor& g, const AttentionMask& mask);

}  // namespace dualsc
