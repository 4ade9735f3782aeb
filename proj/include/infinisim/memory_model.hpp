#pragma once

// Memory requirements of a transformer-shaped model: model states, activation
// checkpoints, full activations and the two working-memory terms.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>

#include "infinisim/error.hpp"

namespace infinisim {

struct ModelConfig {
  std::int64_t nl = 1;          ///< transformer layers
  std::int64_t hd = 1;          ///< hidden dimension
  std::int64_t attn_heads = 1;
  std::int64_t seq = 1;         ///< sequence length in tokens
  double bsz = 1.0;             ///< per-device batch, may be fractional
  std::int64_t ci = 1;          ///< transformer blocks per activation checkpoint

  void validate() const {
    if (nl < 1 || hd < 1 || seq < 1 || attn_heads < 1 || ci < 1) {
      throw DomainError("model config: nl, hd, seq, attn_heads and ci must be >= 1");
    }
    if (!(bsz > 0.0) || !std::isfinite(bsz)) throw DomainError("model config: bsz must be > 0");
    if (ci > nl) throw DomainError("model config: ci must not exceed nl");
  }
};

/// Bytes per parameter for mixed-precision Adam.
struct ModelStateBreakdown {
  static constexpr int fp16_param = 2;
  static constexpr int fp16_grad = 2;
  static constexpr int fp32_momentum = 4;
  static constexpr int fp32_variance = 4;
  static constexpr int fp32_master_param = 4;
  static constexpr int fp32_grad = 4;
  static constexpr int total =
      fp16_param + fp16_grad + fp32_momentum + fp32_variance + fp32_master_param + fp32_grad;
};
static_assert(ModelStateBreakdown::total == 20);

struct MemoryReport {
  std::uint64_t params = 0;
  std::uint64_t model_state_bytes = 0;
  std::uint64_t act_ckpt_bytes = 0;
  std::uint64_t full_activation_bytes = 0;
  std::uint64_t mswm_bytes = 0;
  std::uint64_t awm_bytes = 0;
};

namespace detail {

using wide = unsigned __int128;

inline std::uint64_t narrow(wide v, const char* what) {
  if (v > std::numeric_limits<std::uint64_t>::max()) {
    throw DomainError(std::string(what) + " overflows 64-bit byte count");
  }
  return static_cast<std::uint64_t>(v);
}

inline bool integral(double x) { return std::floor(x) == x && x < 9.0e15; }

// ceil(bsz * rest / divisor) with exact integer arithmetic when bsz is whole.
inline std::uint64_t scaled_ceil(double bsz, wide rest, std::uint64_t divisor, const char* what) {
  if (integral(bsz)) {
    const wide num = static_cast<wide>(static_cast<std::uint64_t>(bsz)) * rest;
    return narrow((num + divisor - 1) / divisor, what);
  }
  const long double v = static_cast<long double>(bsz) * static_cast<long double>(rest) / divisor;
  const long double c = std::ceil(v);
  if (c > static_cast<long double>(std::numeric_limits<std::uint64_t>::max())) {
    throw DomainError(std::string(what) + " overflows 64-bit byte count");
  }
  return static_cast<std::uint64_t>(c);
}

inline wide per_token_block_elems(const ModelConfig& cfg) {
  return 16 * static_cast<wide>(cfg.hd) + 2 * static_cast<wide>(cfg.attn_heads) * static_cast<wide>(cfg.seq);
}

}  // namespace detail

/// 12 * nl * hd^2.
inline std::uint64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide hd = static_cast<detail::wide>(cfg.hd);
  return detail::narrow(12 * static_cast<detail::wide>(cfg.nl) * hd * hd, "param_count");
}

inline std::uint64_t model_state_bytes(const ModelConfig& cfg) {
  return detail::narrow(static_cast<detail::wide>(ModelStateBreakdown::total) * param_count(cfg),
                        "model_state_bytes");
}

/// 2 * bsz * seq * hd * nl / ci, rounded up.
inline std::uint64_t activation_checkpoint_bytes(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide rest = 2 * static_cast<detail::wide>(cfg.seq) * static_cast<detail::wide>(cfg.hd) *
                            static_cast<detail::wide>(cfg.nl);
  return detail::scaled_ceil(cfg.bsz, rest, static_cast<std::uint64_t>(cfg.ci), "activation_checkpoint_bytes");
}

/// Activation elements held between two checkpoints: bsz * seq * ci * (16 hd + 2 heads seq).
inline std::uint64_t awm_elements(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide rest = static_cast<detail::wide>(cfg.seq) * static_cast<detail::wide>(cfg.ci) *
                            detail::per_token_block_elems(cfg);
  return detail::scaled_ceil(cfg.bsz, rest, 1, "awm_elements");
}

/// Activation working memory in bytes, two bytes per half-precision element.
inline std::uint64_t awm_bytes(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide rest = 2 * static_cast<detail::wide>(cfg.seq) * static_cast<detail::wide>(cfg.ci) *
                            detail::per_token_block_elems(cfg);
  return detail::scaled_ceil(cfg.bsz, rest, 1, "awm_bytes");
}

/// Activation bytes with no checkpointing at all.
inline std::uint64_t full_activation_bytes(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide rest = 2 * static_cast<detail::wide>(cfg.seq) * static_cast<detail::wide>(cfg.nl) *
                            detail::per_token_block_elems(cfg);
  return detail::scaled_ceil(cfg.bsz, rest, 1, "full_activation_bytes");
}

/// fp16 parameter + gradient of the hd -> 4hd linear: 16 hd^2.
inline std::uint64_t mswm_bytes(const ModelConfig& cfg) {
  cfg.validate();
  const detail::wide hd = static_cast<detail::wide>(cfg.hd);
  return detail::narrow(16 * hd * hd, "mswm_bytes");
}

inline MemoryReport memory_report(const ModelConfig& cfg) {
  MemoryReport r;
  r.params = param_count(cfg);
  r.model_state_bytes = model_state_bytes(cfg);
  r.act_ckpt_bytes = activation_checkpoint_bytes(cfg);
  r.full_activation_bytes = full_activation_bytes(cfg);
  r.mswm_bytes = mswm_bytes(cfg);
  r.awm_bytes = awm_bytes(cfg);
  return r;
}

/// Human-readable byte count; decimal (GB/TB) unless `binary` (GiB/TiB).
inline std::string format_bytes(double bytes, bool binary = false) {
  static const char* dec[] = {"B", "KB", "MB", "GB", "TB", "PB", "EB"};
  static const char* bin[] = {"B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"};
  const double base = binary ? 1024.0 : 1000.0;
  int i = 0;
  while (bytes >= base && i < 6) {
    bytes /= base;
    ++i;
  }
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f %s", bytes, binary ? bin[i] : dec[i]);
  return buf;
}

}  // namespace infinisim
