#pragma once

// Memory-centric tiling: a large linear operator split into row-block tiles that
// are fetched, applied and released one at a time, plus a contiguous-allocation
// model for how tiling raises the largest trainable hidden size.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/tier_store.hpp"

namespace infinisim {

namespace dense {

/// y[b, col_offset + r] = sum_k x[b, k] * w[r, k] + bias[r]   for r < rows.
/// `w` is rows x in (row-major); `y` has row stride `y_stride`.
template <typename T>
void linear_forward(std::span<const T> w, std::span<const T> bias, std::span<const T> x, std::size_t batch,
                    std::size_t in, std::size_t rows, std::span<T> y, std::size_t y_stride, std::size_t col_offset) {
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * in;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* wr = w.data() + r * in;
      T acc = 0;
      for (std::size_t k = 0; k < in; ++k) acc += xb[k] * wr[k];
      y[b * y_stride + col_offset + r] = acc + bias[r];
    }
  }
}

/// Gradients of one row block. `g` holds upstream grads with row stride
/// `g_stride`, columns [col_offset, col_offset + rows). grad_w and grad_b are
/// overwritten; grad_x (batch x in) is accumulated into.
template <typename T>
void linear_backward(std::span<const T> w, std::span<const T> x, std::span<const T> g, std::size_t batch,
                     std::size_t in, std::size_t rows, std::size_t g_stride, std::size_t col_offset,
                     std::span<T> grad_w, std::span<T> grad_b, std::span<T> grad_x) {
  std::fill(grad_w.begin(), grad_w.end(), T{0});
  std::fill(grad_b.begin(), grad_b.end(), T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * in;
    const T* gb = g.data() + b * g_stride + col_offset;
    for (std::size_t r = 0; r < rows; ++r) {
      const T gr = gb[r];
      T* gw = grad_w.data() + r * in;
      for (std::size_t k = 0; k < in; ++k) gw[k] += gr * xb[k];
      grad_b[r] += gr;
    }
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const T* gb = g.data() + b * g_stride + col_offset;
    T* gx = grad_x.data() + b * in;
    for (std::size_t r = 0; r < rows; ++r) {
      const T gr = gb[r];
      const T* wr = w.data() + r * in;
      for (std::size_t k = 0; k < in; ++k) gx[k] += gr * wr[k];
    }
  }
}

}  // namespace dense

/// Row range of each tile under a ceil split; the last tile may be short. Trailing
/// tiles the split would leave empty are dropped, so `tiles` can be below `requested`.
struct TileLayout {
  std::size_t out_dim = 0;
  std::size_t requested = 1;
  std::size_t tiles = 1;
  std::size_t rows_per_tile = 0;

  std::size_t row_begin(std::size_t t) const { return std::min(out_dim, t * rows_per_tile); }
  std::size_t rows(std::size_t t) const { return std::min(out_dim, (t + 1) * rows_per_tile) - row_begin(t); }

  static TileLayout make(std::size_t out_dim, std::size_t tiles) {
    if (tiles < 1) throw DomainError("tiling: tile count must be >= 1");
    if (tiles > out_dim) throw DomainError("tiling: more tiles than output rows");
    TileLayout l;
    l.out_dim = out_dim;
    l.requested = tiles;
    l.rows_per_tile = (out_dim + tiles - 1) / tiles;
    l.tiles = (out_dim + l.rows_per_tile - 1) / l.rows_per_tile;
    return l;
  }
};

template <typename T>
struct TiledLinear {
  std::string name;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  TileLayout layout;
  TierKind tier = TierKind::Host;

  std::size_t tiles() const { return layout.tiles; }
  std::string weight_key(std::size_t t) const { return name + "/tile" + std::to_string(t) + "/w"; }
  std::string bias_key(std::size_t t) const { return name + "/tile" + std::to_string(t) + "/b"; }
  std::size_t tile_bytes(std::size_t t) const { return layout.rows(t) * (in_dim + 1) * sizeof(T); }
  std::size_t untiled_bytes() const { return out_dim * (in_dim + 1) * sizeof(T); }
};

/// Splits W (out x in, row-major) and b into row-block tiles persisted on `tier`.
template <typename T>
TiledLinear<T> tile_linear(const std::string& name, std::span<const T> w, std::span<const T> b, std::size_t out_dim,
                           std::size_t in_dim, std::size_t tiles, TierStore& store, TierKind tier) {
  if (w.size() != out_dim * in_dim || b.size() != out_dim) throw ShapeError("tile_linear: W/b shape mismatch");
  TiledLinear<T> tl{name, in_dim, out_dim, TileLayout::make(out_dim, tiles), tier};
  std::vector<IoTicket> tickets;
  for (std::size_t t = 0; t < tl.tiles(); ++t) {
    const std::size_t r0 = tl.layout.row_begin(t), rows = tl.layout.rows(t);
    tickets.push_back(store.write(tl.weight_key(t), Tensor::from(w.subspan(r0 * in_dim, rows * in_dim)), tier));
    tickets.push_back(store.write(tl.bias_key(t), Tensor::from(b.subspan(r0, rows)), tier));
  }
  flush(tickets);
  return tl;
}

/// One tile's parameters, resident on the device tier while held.
template <typename T>
class ResidentTile {
 public:
  ResidentTile(const TiledLinear<T>& tl, std::size_t t, TierStore& store) : store_(&store) {
    auto rw = store.read(tl.weight_key(t), tl.tier);
    auto rb = store.read(tl.bias_key(t), tl.tier);
    flush({rw, rb});
    w_key_ = "resident/" + tl.weight_key(t);
    b_key_ = "resident/" + tl.bias_key(t);
    Tensor w = rw.take();
    Tensor b = rb.take();
    flush({store.write(w_key_, w, TierKind::Device), store.write(b_key_, b, TierKind::Device)});
    w_ = w.to_vector<T>();
    b_ = b.to_vector<T>();
  }
  ResidentTile(const ResidentTile&) = delete;
  ResidentTile& operator=(const ResidentTile&) = delete;
  ~ResidentTile() {
    try {
      store_->remove(w_key_, TierKind::Device);
      store_->remove(b_key_, TierKind::Device);
    } catch (...) {
    }
  }

  std::span<const T> weight() const { return w_; }
  std::span<const T> bias() const { return b_; }

 private:
  TierStore* store_;
  std::string w_key_, b_key_;
  std::vector<T> w_, b_;
};

/// y = x W^T + b computed one tile at a time. `x` is batch x in_dim.
template <typename T>
std::vector<T> forward_tiled(const TiledLinear<T>& tl, std::span<const T> x, std::size_t batch, TierStore& store) {
  if (x.size() != batch * tl.in_dim) throw ShapeError("forward_tiled: input width != in_dim");
  std::vector<T> y(batch * tl.out_dim);
  for (std::size_t t = 0; t < tl.tiles(); ++t) {
    ResidentTile<T> tile(tl, t, store);
    dense::linear_forward<T>(tile.weight(), tile.bias(), x, batch, tl.in_dim, tl.layout.rows(t), y, tl.out_dim,
                             tl.layout.row_begin(t));
  }
  return y;
}

template <typename T>
struct TiledGrads {
  std::vector<std::vector<T>> grad_w;  ///< per tile, rows x in_dim
  std::vector<std::vector<T>> grad_b;  ///< per tile
  std::vector<T> grad_x;               ///< batch x in_dim
};

/// Backward over tiles in order; grad_x accumulates W_t^T g_t tile by tile.
template <typename T>
TiledGrads<T> backward_tiled(const TiledLinear<T>& tl, std::span<const T> x, std::span<const T> upstream,
                             std::size_t batch, TierStore& store) {
  if (x.size() != batch * tl.in_dim) throw ShapeError("backward_tiled: input width != in_dim");
  if (upstream.size() != batch * tl.out_dim) throw ShapeError("backward_tiled: upstream grad width != out_dim");
  TiledGrads<T> g;
  g.grad_x.assign(batch * tl.in_dim, T{0});
  for (std::size_t t = 0; t < tl.tiles(); ++t) {
    ResidentTile<T> tile(tl, t, store);
    const std::size_t rows = tl.layout.rows(t);
    std::vector<T> gw(rows * tl.in_dim), gb(rows);
    dense::linear_backward<T>(tile.weight(), x, upstream, batch, tl.in_dim, rows, tl.out_dim, tl.layout.row_begin(t),
                              gw, gb, g.grad_x);
    g.grad_w.push_back(std::move(gw));
    g.grad_b.push_back(std::move(gb));
  }
  return g;
}

/// Reassembles the full W (out x in) from stored tiles.
template <typename T>
std::vector<T> reassemble_weight(const TiledLinear<T>& tl, TierStore& store) {
  std::vector<T> w;
  w.reserve(tl.out_dim * tl.in_dim);
  for (std::size_t t = 0; t < tl.tiles(); ++t) {
    auto part = store.read(tl.weight_key(t), tl.tier).take().template to_vector<T>();
    w.insert(w.end(), part.begin(), part.end());
  }
  return w;
}

/// One tensor the training step keeps resident for the hd -> 4hd linear, sized
/// `bytes_per_hd2 * hd^2 / tiles`.
struct AllocationTerm {
  std::string name;
  double bytes_per_hd2 = 0.0;
};

struct AllocationModel {
  std::vector<AllocationTerm> terms;

  /// fp16 parameter and gradient, optionally the three fp32 optimizer tensors.
  static AllocationModel standard(bool fp32_states_resident) {
    AllocationModel m;
    m.terms = {{"fp16_param", 8.0}, {"fp16_grad", 8.0}};
    if (fp32_states_resident) {
      m.terms.push_back({"fp32_master", 16.0});
      m.terms.push_back({"fp32_momentum", 16.0});
      m.terms.push_back({"fp32_variance", 16.0});
    }
    return m;
  }

  double largest_allocation(std::uint64_t hd, std::uint64_t tiles) const {
    double worst = 0.0;
    const double h = static_cast<double>(hd);
    for (const auto& t : terms) worst = std::max(worst, std::ceil(t.bytes_per_hd2 * h * h / static_cast<double>(tiles)));
    return worst;
  }
};

/// Largest hidden size whose biggest single allocation fits in one contiguous chunk.
inline std::uint64_t max_hidden_under_fragmentation(double chunk_bytes, std::uint64_t tiles,
                                                    const AllocationModel& model) {
  if (!(chunk_bytes > 0.0)) throw DomainError("max_hidden_under_fragmentation: chunk must be > 0");
  if (tiles < 1) throw DomainError("max_hidden_under_fragmentation: tiles must be >= 1");
  if (model.terms.empty()) throw DomainError("max_hidden_under_fragmentation: empty allocation model");
  auto fits = [&](std::uint64_t hd) { return model.largest_allocation(hd, tiles) <= chunk_bytes; };
  if (!fits(1)) return 0;
  std::uint64_t lo = 1, hi = 2;
  while (fits(hi)) {
    lo = hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    (fits(mid) ? lo : hi) = mid;
  }
  return lo;
}

}  // namespace infinisim
