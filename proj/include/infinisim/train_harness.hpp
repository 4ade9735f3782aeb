#pragma once

// Desk-scale mixed-precision training with partitioned, tier-offloaded model
// states. Every parameter group is sharded across ranks at initialization;
// layers gather their fp16 parameters right before use and release them after;
// fp16 gradients are reduce-scattered and offloaded; Adam streams the fp32
// states through in bounded chunks.
//
// Numerics are arranged so the result never depends on rank count or tier:
// the batch is cut into a fixed number of micro-batches, ranks own consecutive
// micro-batches, and every reduction sums micro-batch contributions in one
// global order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "infinisim/collectives.hpp"
#include "infinisim/error.hpp"
#include "infinisim/half.hpp"
#include "infinisim/overlap_engine.hpp"
#include "infinisim/tier_store.hpp"
#include "infinisim/tiling.hpp"

namespace infinisim {

enum class Activation { Identity, Relu, GeluApprox };

constexpr std::string_view activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::GeluApprox: return "gelu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity" || s == "none") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "gelu" || s == "gelu-approx") return Activation::GeluApprox;
  throw DomainError("unknown activation '" + std::string(s) + "'");
}

namespace act {

template <typename T>
T apply(Activation a, T z) {
  switch (a) {
    case Activation::Identity: return z;
    case Activation::Relu: return z > T(0) ? z : T(0);
    case Activation::GeluApprox: {
      const T c = T(0.7978845608028654);  // sqrt(2/pi)
      return T(0.5) * z * (T(1) + std::tanh(c * (z + T(0.044715) * z * z * z)));
    }
  }
  return z;
}

template <typename T>
T derivative(Activation a, T z) {
  switch (a) {
    case Activation::Identity: return T(1);
    case Activation::Relu: return z > T(0) ? T(1) : T(0);
    case Activation::GeluApprox: {
      const T c = T(0.7978845608028654);
      const T th = std::tanh(c * (z + T(0.044715) * z * z * z));
      return T(0.5) * (T(1) + th) + T(0.5) * z * (T(1) - th * th) * c * (T(1) + T(3) * T(0.044715) * z * z);
    }
  }
  return T(1);
}

}  // namespace act

struct LayerSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  std::size_t tiles = 1;  ///< > 1 makes this a tiled linear
  Activation activation = Activation::Identity;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::vector<std::pair<std::size_t, std::size_t>> tied_pairs;  ///< (owner, consumer), owner < consumer
  std::uint64_t seed = 0;

  void validate() const {
    if (layers.empty()) throw DomainError("model spec: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.in_dim < 1 || l.out_dim < 1) throw DomainError("model spec: layer " + std::to_string(i) + " has a zero dim");
      if (l.tiles < 1 || l.tiles > l.out_dim) {
        throw DomainError("model spec: layer " + std::to_string(i) + " tiles must be in [1, out]");
      }
      (void)TileLayout::make(l.out_dim, l.tiles);
      if (i + 1 < layers.size() && l.out_dim != layers[i + 1].in_dim) {
        throw DomainError("model spec: layer " + std::to_string(i) + " out != layer " + std::to_string(i + 1) + " in");
      }
    }
    std::set<std::size_t> consumers;
    for (auto [a, b] : tied_pairs) {
      if (a >= b || b >= layers.size()) throw DomainError("model spec: tied pair must be (a, b) with a < b < layers");
      const auto &la = layers[a], &lb = layers[b];
      if (la.in_dim != lb.in_dim || la.out_dim != lb.out_dim) throw DomainError("model spec: tied layers differ in shape");
      if (la.tiles != 1 || lb.tiles != 1) throw DomainError("model spec: tied layers cannot be tiled");
      if (!consumers.insert(b).second) throw DomainError("model spec: layer tied twice");
      if (consumers.count(a)) throw DomainError("model spec: a tied consumer cannot own another tie");
    }
  }

  /// Owning layer of the parameters layer `l` computes with.
  std::size_t owner_of(std::size_t l) const {
    for (auto [a, b] : tied_pairs) {
      if (b == l) return a;
    }
    return l;
  }
};

/// Tier of each model-state category.
struct Placement {
  TierKind param_tier = TierKind::Device;  ///< fp16 parameters
  TierKind grad_tier = TierKind::Device;   ///< fp16 gradients
  TierKind opt_tier = TierKind::Device;    ///< fp32 master, momentum, variance

  static Placement all(TierKind t) { return {t, t, t}; }

  friend bool operator==(const Placement&, const Placement&) = default;
};

inline Placement parse_placement(std::string_view s) {
  if (s == "device") return Placement::all(TierKind::Device);
  if (s == "host") return Placement::all(TierKind::Host);
  if (s == "nvme") return Placement::all(TierKind::Nvme);
  throw DomainError("unknown tier '" + std::string(s) + "' (device|host|nvme)");
}

struct AdamHyper {
  float lr = 1e-2f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::uint64_t step = 0;

  void validate() const {
    if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) throw DomainError("adam: betas must be in [0,1)");
    if (!(eps > 0.0f)) throw DomainError("adam: eps must be > 0");
  }
};

/// One partitioned parameter tensor: a whole linear layer, or one tile of one.
/// Flattened as [W (rows x in), b (rows)].
struct ParamGroup {
  std::string key;
  std::size_t layer = 0;
  std::size_t row_begin = 0;
  std::size_t rows = 0;
  std::size_t in_dim = 0;
  PartitionedTensor fp16;
  PartitionedTensor grad16;
  PartitionedTensor master;
  PartitionedTensor momentum;
  PartitionedTensor variance;

  std::size_t elems() const { return rows * in_dim + rows; }
};

struct InitStats {
  std::uint64_t peak_full_param_bytes = 0;  ///< largest unpartitioned buffer alive during init
  std::uint64_t max_layer_param_bytes = 0;
};

struct PartitionedModel {
  ModelSpec spec;
  std::size_t world = 1;
  Placement placement;
  std::vector<ParamGroup> groups;
  std::map<std::string, std::size_t> group_index;
  std::vector<std::vector<std::string>> compute_keys;  ///< keys each layer reads, by layer
  std::vector<std::vector<std::string>> fetch_sets;    ///< keys gathered before each layer runs
  Trace trace;
  PrefetchPlan plan;
  InitStats init_stats;
  std::uint64_t max_gathered_bytes = 0;  ///< largest fp32 gather footprint of any layer step

  const ParamGroup& group(const std::string& key) const {
    auto it = group_index.find(key);
    if (it == group_index.end()) throw KeyNotFound("unknown parameter key '" + key + "'");
    return groups[it->second];
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Uniform in [lo, hi) from the top 24 bits of a 64-bit draw; identical on every platform.
inline float uniform(std::mt19937_64& rng, float lo, float hi) {
  const float u = static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
  return lo + (hi - lo) * u;
}

inline std::string layer_key(std::size_t l) { return "layer" + std::to_string(l); }

inline std::string tile_key(std::size_t l, std::size_t t) { return layer_key(l) + "/tile" + std::to_string(t); }

inline void rebuild_schedule(PartitionedModel& m) {
  std::vector<LayerCost> costs;
  for (std::size_t l = 0; l < m.spec.layers.size(); ++l) {
    const auto& ls = m.spec.layers[l];
    double bytes = 0.0;
    for (const auto& k : m.fetch_sets[l]) bytes += 2.0 * static_cast<double>(m.group(k).elems());
    const double flops = 2.0 * static_cast<double>(ls.in_dim * ls.out_dim);
    costs.push_back({layer_key(l), std::max(bytes, 1.0), flops});
  }
  m.trace = trace_schedule(costs);
  m.plan = plan_prefetch(m.trace.forward);
}

}  // namespace detail

/// Seeded uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases of one layer, row-major.
inline std::vector<float> init_layer_params(const ModelSpec& spec, std::size_t layer) {
  const auto& l = spec.layers[layer];
  std::mt19937_64 rng(detail::splitmix64(spec.seed * 1000003ull + layer));
  const float bound = 1.0f / std::sqrt(static_cast<float>(l.in_dim));
  std::vector<float> p(l.out_dim * l.in_dim + l.out_dim);
  for (auto& v : p) v = detail::uniform(rng, -bound, bound);
  return p;
}

/// Builds the partitioned model. Each layer is generated, sharded and dropped
/// before the next one exists.
inline PartitionedModel init_partitioned(const ModelSpec& spec, std::size_t world, TierStore& store,
                                         Placement placement) {
  spec.validate();
  if (world < 1) throw DomainError("init_partitioned: world size must be >= 1");
  PartitionedModel m;
  m.spec = spec;
  m.world = world;
  m.placement = placement;
  m.compute_keys.resize(spec.layers.size());
  m.fetch_sets.resize(spec.layers.size());

  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& ls = spec.layers[l];
    const std::size_t owner = spec.owner_of(l);
    if (owner != l) {
      m.compute_keys[l] = m.compute_keys[owner];
      continue;  // tied consumer: reads the owner's key, fetches nothing until registered
    }
    const std::vector<float> full = init_layer_params(spec, l);
    m.init_stats.peak_full_param_bytes = std::max<std::uint64_t>(m.init_stats.peak_full_param_bytes, full.size() * 4);
    m.init_stats.max_layer_param_bytes = std::max<std::uint64_t>(m.init_stats.max_layer_param_bytes, full.size() * 4);
    const std::span<const float> w(full.data(), ls.out_dim * ls.in_dim);
    const std::span<const float> b(full.data() + ls.out_dim * ls.in_dim, ls.out_dim);
    const TileLayout layout = TileLayout::make(ls.out_dim, ls.tiles);

    for (std::size_t t = 0; t < layout.tiles; ++t) {
      ParamGroup g;
      g.key = ls.tiles > 1 ? detail::tile_key(l, t) : detail::layer_key(l);
      g.layer = l;
      g.row_begin = layout.row_begin(t);
      g.rows = layout.rows(t);
      g.in_dim = ls.in_dim;
      std::vector<float> master;
      master.reserve(g.elems());
      master.insert(master.end(), w.begin() + static_cast<std::ptrdiff_t>(g.row_begin * ls.in_dim),
                    w.begin() + static_cast<std::ptrdiff_t>((g.row_begin + g.rows) * ls.in_dim));
      master.insert(master.end(), b.begin() + static_cast<std::ptrdiff_t>(g.row_begin),
                    b.begin() + static_cast<std::ptrdiff_t>(g.row_begin + g.rows));
      std::vector<Half> half(master.size());
      std::transform(master.begin(), master.end(), half.begin(), [](float v) { return to_half(v); });
      const std::vector<float> zeros(master.size(), 0.0f);
      const std::vector<Half> zeros16(master.size());

      g.fp16 = partition(g.key + "/fp16", Tensor::from(half), world, placement.param_tier, store);
      g.grad16 = partition(g.key + "/grad16", Tensor::from(zeros16), world, placement.grad_tier, store);
      g.master = partition(g.key + "/master", Tensor::from(master), world, placement.opt_tier, store);
      g.momentum = partition(g.key + "/momentum", Tensor::from(zeros), world, placement.opt_tier, store);
      g.variance = partition(g.key + "/variance", Tensor::from(zeros), world, placement.opt_tier, store);

      m.compute_keys[l].push_back(g.key);
      m.fetch_sets[l].push_back(g.key);
      m.group_index[g.key] = m.groups.size();
      m.groups.push_back(std::move(g));
    }
  }
  detail::rebuild_schedule(m);
  return m;
}

/// Adds `key` to the fetch set of `consumer_layer`, so a parameter owned by another
/// layer is gathered before the consumer runs. Idempotent.
inline void register_external_param(PartitionedModel& m, const std::string& key, std::size_t consumer_layer) {
  (void)m.group(key);
  if (consumer_layer >= m.fetch_sets.size()) throw DomainError("register_external_param: no such layer");
  auto& fs = m.fetch_sets[consumer_layer];
  if (std::find(fs.begin(), fs.end(), key) == fs.end()) fs.push_back(key);
  detail::rebuild_schedule(m);
}

/// Registers every tied pair's owner key with its consumer.
inline void register_tied_params(PartitionedModel& m) {
  for (auto [a, b] : m.spec.tied_pairs) {
    for (const auto& k : m.compute_keys[a]) register_external_param(m, k, b);
  }
}

struct TrainBatch {
  std::vector<float> inputs;   ///< samples x in_dim of layer 0
  std::vector<float> targets;  ///< samples x out_dim of the last layer
  std::size_t samples = 0;
};

struct StepOptions {
  std::size_t micro_batches = 4;
  std::size_t chunk_elems = 64;
};

namespace detail {

/// fp16 parameters of `key`, gathered and widened to fp32, held on the device tier.
class GatheredParam {
 public:
  GatheredParam(const PartitionedModel& m, const std::string& key, TierStore& store) : store_(&store) {
    const auto& g = m.group(key);
    const Tensor half = allgather(g.fp16, store);
    values_.resize(half.size());
    const auto hs = half.as<Half>();
    std::transform(hs.begin(), hs.end(), values_.begin(), [](Half h) { return to_float(h); });
    device_key_ = "gathered/" + key;
    store.write(device_key_, Tensor::from(values_), TierKind::Device).wait();
    rows_ = g.rows;
    in_ = g.in_dim;
  }
  GatheredParam(const GatheredParam&) = delete;
  GatheredParam& operator=(const GatheredParam&) = delete;
  GatheredParam(GatheredParam&& o) noexcept
      : store_(std::exchange(o.store_, nullptr)),
        device_key_(std::move(o.device_key_)),
        values_(std::move(o.values_)),
        rows_(o.rows_),
        in_(o.in_) {}
  ~GatheredParam() {
    if (!store_) return;
    try {
      store_->remove(device_key_, TierKind::Device);
    } catch (...) {
    }
  }

  std::span<const float> weight() const { return {values_.data(), rows_ * in_}; }
  std::span<const float> bias() const { return {values_.data() + rows_ * in_, rows_}; }

 private:
  TierStore* store_;
  std::string device_key_;
  std::vector<float> values_;
  std::size_t rows_ = 0, in_ = 0;
};

class GatherScope {
 public:
  GatherScope(PartitionedModel& m, std::size_t layer, TierStore& store) : m_(&m), layer_(layer) {
    for (const auto& k : m.fetch_sets[layer]) held_.emplace(k, GatheredParam(m, k, store));
    std::uint64_t bytes = 0;
    for (const auto& k : m.fetch_sets[layer]) bytes += 4 * m.group(k).elems();
    m.max_gathered_bytes = std::max(m.max_gathered_bytes, bytes);
  }

  const GatheredParam& get(const std::string& key) const {
    auto it = held_.find(key);
    if (it == held_.end()) {
      throw MissingParam("layer " + std::to_string(layer_) + " uses '" + key +
                         "' which is not in its fetch set; register it as an external parameter");
    }
    return it->second;
  }

 private:
  PartitionedModel* m_;
  std::size_t layer_;
  std::map<std::string, GatheredParam> held_;
};

}  // namespace detail

/// Adam with bias correction over every owned shard, `chunk_elems` elements at a
/// time. Increments hyper.step first.
inline void chunked_adam_step(PartitionedModel& m, AdamHyper& hyper, std::size_t chunk_elems, TierStore& store) {
  hyper.validate();
  if (chunk_elems < 1) throw DomainError("chunked_adam_step: chunk must hold at least one element");
  ++hyper.step;
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta1), static_cast<double>(hyper.step)));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta2), static_cast<double>(hyper.step)));
  for (const auto& g : m.groups) {
    for (std::size_t r = 0; r < m.world; ++r) {
      for (std::size_t off = 0; off < g.master.shard_len; off += chunk_elems) {
        const std::size_t n = std::min(chunk_elems, g.master.shard_len - off);
        auto tp = store.read_range(g.master.shard_key(r), g.master.tier, off, n);
        auto tm = store.read_range(g.momentum.shard_key(r), g.momentum.tier, off, n);
        auto tv = store.read_range(g.variance.shard_key(r), g.variance.tier, off, n);
        auto tg = store.read_range(g.grad16.shard_key(r), g.grad16.tier, off, n);
        flush({tp, tm, tv, tg});
        Tensor p = tp.take(), mo = tm.take(), va = tv.take();
        const Tensor gr = tg.take();
        Tensor p16(DType::F16, n);
        auto ps = p.as<float>();
        auto ms = mo.as<float>();
        auto vs = va.as<float>();
        auto gs = gr.as<Half>();
        auto hs = p16.as<Half>();
        for (std::size_t i = 0; i < n; ++i) {
          const float grad = to_float(gs[i]);
          ms[i] = hyper.beta1 * ms[i] + (1.0f - hyper.beta1) * grad;
          vs[i] = hyper.beta2 * vs[i] + (1.0f - hyper.beta2) * grad * grad;
          const float mhat = ms[i] / bc1;
          const float vhat = vs[i] / bc2;
          ps[i] = ps[i] - hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
          hs[i] = to_half(ps[i]);
        }
        flush({store.update_range(g.master.shard_key(r), g.master.tier, off, p),
               store.update_range(g.momentum.shard_key(r), g.momentum.tier, off, mo),
               store.update_range(g.variance.shard_key(r), g.variance.tier, off, va),
               store.update_range(g.fp16.shard_key(r), g.fp16.tier, off, p16)});
      }
    }
  }
}

/// One forward/backward/optimizer step; returns the mean squared error before the update.
inline double train_step(PartitionedModel& m, const TrainBatch& batch, AdamHyper& hyper, TierStore& store,
                         StepOptions opt = {}) {
  const auto& layers = m.spec.layers;
  const std::size_t L = layers.size();
  const std::size_t in0 = layers.front().in_dim, outL = layers.back().out_dim;
  if (batch.samples == 0 || batch.inputs.size() != batch.samples * in0 || batch.targets.size() != batch.samples * outL) {
    throw ShapeError("train_step: batch shape does not match the model");
  }
  const std::size_t M = opt.micro_batches;
  if (M == 0 || batch.samples % M != 0) throw ShapeError("train_step: samples must divide into micro-batches");
  if (M % m.world != 0) throw ShapeError("train_step: micro-batches must divide evenly across ranks");
  const std::size_t mb = batch.samples / M;

  // acts[l][k]: input of layer l for micro-batch k; pre[l][k]: pre-activation output.
  std::vector<std::vector<std::vector<float>>> acts(L + 1, std::vector<std::vector<float>>(M));
  std::vector<std::vector<std::vector<float>>> pre(L, std::vector<std::vector<float>>(M));
  for (std::size_t k = 0; k < M; ++k) {
    acts[0][k].assign(batch.inputs.begin() + static_cast<std::ptrdiff_t>(k * mb * in0),
                      batch.inputs.begin() + static_cast<std::ptrdiff_t>((k + 1) * mb * in0));
  }

  for (std::size_t l = 0; l < L; ++l) {
    const auto& ls = layers[l];
    for (std::size_t k = 0; k < M; ++k) pre[l][k].assign(mb * ls.out_dim, 0.0f);
    auto run_group = [&](const detail::GatheredParam& p, const ParamGroup& g) {
      for (std::size_t k = 0; k < M; ++k) {
        dense::linear_forward<float>(p.weight(), p.bias(), acts[l][k], mb, ls.in_dim, g.rows, pre[l][k], ls.out_dim,
                                     g.row_begin);
      }
    };
    if (ls.tiles > 1) {
      for (const auto& key : m.compute_keys[l]) {
        const auto& fs = m.fetch_sets[l];
        if (std::find(fs.begin(), fs.end(), key) == fs.end()) throw MissingParam("tile '" + key + "' not in fetch set");
        detail::GatheredParam p(m, key, store);
        m.max_gathered_bytes = std::max<std::uint64_t>(m.max_gathered_bytes, 4 * m.group(key).elems());
        run_group(p, m.group(key));
      }
    } else {
      detail::GatherScope scope(m, l, store);
      for (const auto& key : m.compute_keys[l]) run_group(scope.get(key), m.group(key));
    }
    for (std::size_t k = 0; k < M; ++k) {
      acts[l + 1][k].resize(pre[l][k].size());
      std::transform(pre[l][k].begin(), pre[l][k].end(), acts[l + 1][k].begin(),
                     [a = ls.activation](float z) { return act::apply(a, z); });
    }
  }

  // loss and its gradient
  const float scale = 1.0f / static_cast<float>(batch.samples * outL);
  double loss = 0.0;
  std::vector<std::vector<float>> upstream(M);
  {
    float total = 0.0f;
    for (std::size_t k = 0; k < M; ++k) {
      upstream[k].resize(mb * outL);
      float part = 0.0f;
      for (std::size_t i = 0; i < mb * outL; ++i) {
        const float d = acts[L][k][i] - batch.targets[k * mb * outL + i];
        part += d * d;
        upstream[k][i] = 2.0f * d * scale;
      }
      total += part;
    }
    loss = static_cast<double>(total * scale);
  }

  // Remaining uses per key in backward; a key is reduced once its last user finishes.
  std::map<std::string, std::size_t> remaining;
  for (std::size_t l = 0; l < L; ++l) {
    for (const auto& key : m.compute_keys[l]) ++remaining[key];
  }
  std::map<std::string, std::vector<std::vector<float>>> grad_acc;  // key -> per micro-batch fp32 grads

  auto finish_key = [&](const std::string& key) {
    const auto& g = m.group(key);
    auto& per_mb = grad_acc[key];
    std::vector<Tensor> contribs;
    contribs.reserve(M);
    for (std::size_t k = 0; k < M; ++k) {
      std::vector<Half> h(per_mb[k].size());
      std::transform(per_mb[k].begin(), per_mb[k].end(), h.begin(), [](float v) { return to_half(v); });
      contribs.push_back(Tensor::from(h));
    }
    const auto shards = reduce_scatter(contribs, m.world);
    write_shards(g.grad16, shards, store);
    grad_acc.erase(key);
  };

  for (std::size_t l = L; l-- > 0;) {
    const auto& ls = layers[l];
    std::vector<std::vector<float>> gz(M), gx(M);
    for (std::size_t k = 0; k < M; ++k) {
      gz[k].resize(mb * ls.out_dim);
      for (std::size_t i = 0; i < gz[k].size(); ++i) gz[k][i] = upstream[k][i] * act::derivative(ls.activation, pre[l][k][i]);
      gx[k].assign(mb * ls.in_dim, 0.0f);
    }
    auto backprop_group = [&](const detail::GatheredParam& p, const std::string& key) {
      const auto& g = m.group(key);
      auto& acc = grad_acc[key];
      if (acc.empty()) acc.assign(M, std::vector<float>(g.elems(), 0.0f));
      std::vector<float> gw(g.rows * g.in_dim), gb(g.rows);
      for (std::size_t k = 0; k < M; ++k) {
        dense::linear_backward<float>(p.weight(), acts[l][k], gz[k], mb, ls.in_dim, g.rows, ls.out_dim, g.row_begin,
                                      gw, gb, gx[k]);
        auto& a = acc[k];
        for (std::size_t i = 0; i < gw.size(); ++i) a[i] += gw[i];
        for (std::size_t i = 0; i < gb.size(); ++i) a[gw.size() + i] += gb[i];
      }
      if (--remaining[key] == 0) finish_key(key);
    };
    if (ls.tiles > 1) {
      for (const auto& key : m.compute_keys[l]) {
        detail::GatheredParam p(m, key, store);
        backprop_group(p, key);
      }
    } else {
      detail::GatherScope scope(m, l, store);
      for (const auto& key : m.compute_keys[l]) backprop_group(scope.get(key), key);
    }
    upstream = std::move(gx);
  }

  chunked_adam_step(m, hyper, opt.chunk_elems, store);
  return loss;
}

/// FNV-1a over every group's fp32 master and fp16 parameters, in key order.
inline std::string model_digest(const PartitionedModel& m, TierStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      h ^= static_cast<std::uint64_t>(b);
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [key, idx] : m.group_index) {
    const auto& g = m.groups[idx];
    mix(std::as_bytes(std::span(key.data(), key.size())));
    mix(allgather(g.master, store).bytes());
    mix(allgather(g.fp16, store).bytes());
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Full fp32 master weights of layer `l` (W then b), reassembled from its groups.
inline std::vector<float> gather_master_layer(const PartitionedModel& m, std::size_t l, TierStore& store) {
  const std::size_t owner = m.spec.owner_of(l);
  const auto& ls = m.spec.layers[owner];
  std::vector<float> w(ls.out_dim * ls.in_dim), b(ls.out_dim);
  for (const auto& key : m.compute_keys[owner]) {
    const auto& g = m.group(key);
    const auto full = allgather(g.master, store).to_vector<float>();
    std::copy(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(g.rows * g.in_dim),
              w.begin() + static_cast<std::ptrdiff_t>(g.row_begin * g.in_dim));
    std::copy(full.begin() + static_cast<std::ptrdiff_t>(g.rows * g.in_dim), full.end(),
              b.begin() + static_cast<std::ptrdiff_t>(g.row_begin));
  }
  w.insert(w.end(), b.begin(), b.end());
  return w;
}

/// Unpartitioned forward/backward of the whole model on one batch, in any
/// precision. `params[l]` holds layer l's [W, b] (only owners are read; tied
/// consumers use their owner's entry). Returns the summed squared error and, if
/// `grads` is given, accumulates d(scale * sse)/d(params) into it.
template <typename T>
T dense_sse_and_grads(const ModelSpec& spec, const std::vector<std::vector<T>>& params, std::span<const T> x,
                      std::span<const T> y, std::size_t batch, T scale, std::vector<std::vector<T>>* grads) {
  const std::size_t L = spec.layers.size();
  std::vector<std::vector<T>> acts(L + 1), pre(L);
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < L; ++l) {
    const auto& ls = spec.layers[l];
    const auto& p = params[spec.owner_of(l)];
    const std::span<const T> w(p.data(), ls.out_dim * ls.in_dim), b(p.data() + ls.out_dim * ls.in_dim, ls.out_dim);
    pre[l].assign(batch * ls.out_dim, T(0));
    dense::linear_forward<T>(w, b, acts[l], batch, ls.in_dim, ls.out_dim, pre[l], ls.out_dim, 0);
    acts[l + 1].resize(pre[l].size());
    for (std::size_t i = 0; i < pre[l].size(); ++i) acts[l + 1][i] = act::apply(ls.activation, pre[l][i]);
  }
  T sse = 0;
  std::vector<T> up(acts[L].size());
  for (std::size_t i = 0; i < up.size(); ++i) {
    const T d = acts[L][i] - y[i];
    sse += d * d;
    up[i] = T(2) * d * scale;
  }
  if (!grads) return sse;
  for (std::size_t l = L; l-- > 0;) {
    const auto& ls = spec.layers[l];
    const std::size_t owner = spec.owner_of(l);
    const auto& p = params[owner];
    std::vector<T> gz(up.size()), gx(batch * ls.in_dim, T(0)), gw(ls.out_dim * ls.in_dim), gb(ls.out_dim);
    for (std::size_t i = 0; i < gz.size(); ++i) gz[i] = up[i] * act::derivative(ls.activation, pre[l][i]);
    dense::linear_backward<T>(std::span<const T>(p.data(), ls.out_dim * ls.in_dim), acts[l], gz, batch, ls.in_dim,
                              ls.out_dim, ls.out_dim, 0, gw, gb, gx);
    auto& g = (*grads)[owner];
    for (std::size_t i = 0; i < gw.size(); ++i) g[i] += gw[i];
    for (std::size_t i = 0; i < gb.size(); ++i) g[gw.size() + i] += gb[i];
    up = std::move(gx);
  }
  return sse;
}

/// Seeded synthetic regression: inputs uniform(-1, 1), targets from a random linear teacher.
inline TrainBatch make_regression_task(const ModelSpec& spec, std::size_t samples, std::uint64_t seed) {
  spec.validate();
  const std::size_t in = spec.layers.front().in_dim, out = spec.layers.back().out_dim;
  std::mt19937_64 rng(detail::splitmix64(seed ^ 0x5eed5eed5eedull));
  TrainBatch b;
  b.samples = samples;
  b.inputs.resize(samples * in);
  for (auto& v : b.inputs) v = detail::uniform(rng, -1.0f, 1.0f);
  std::vector<float> teacher(out * in);
  for (auto& v : teacher) v = detail::uniform(rng, -1.0f, 1.0f);
  b.targets.assign(samples * out, 0.0f);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t o = 0; o < out; ++o) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < in; ++k) acc += teacher[o * in + k] * b.inputs[s * in + k];
      b.targets[s * out + o] = acc;
    }
  }
  return b;
}

struct TrainConfig {
  std::size_t world = 1;
  Placement placement;
  std::size_t steps = 50;
  std::uint64_t seed = 7;
  std::size_t samples = 32;
  StepOptions step;
  AdamHyper hyper;
  /// Called after each completed step (1-based); used for fault injection.
  std::function<void(std::size_t step, PartitionedModel&)> after_step;
};

struct TrainResult {
  std::string init_digest;
  std::string final_digest;
  std::vector<double> losses;
  std::uint64_t peak_device_used = 0;
  std::uint64_t max_gathered_bytes = 0;
  InitStats init_stats;
};

/// Initializes, registers tied parameters, trains, and digests the result.
inline TrainResult run_training(ModelSpec spec, const TrainConfig& cfg, TierStore& store) {
  spec.seed = cfg.seed;
  auto model = init_partitioned(spec, cfg.world, store, cfg.placement);
  register_tied_params(model);
  const TrainBatch batch = make_regression_task(spec, cfg.samples, cfg.seed);
  TrainResult res;
  res.init_stats = model.init_stats;
  res.init_digest = model_digest(model, store);
  store.reset_peaks();
  AdamHyper hyper = cfg.hyper;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    res.losses.push_back(train_step(model, batch, hyper, store, cfg.step));
    if (cfg.after_step) cfg.after_step(s + 1, model);
  }
  res.peak_device_used = store.stats()[TierKind::Device].peak_used;
  res.max_gathered_bytes = model.max_gathered_bytes;
  res.final_digest = cfg.steps == 0 ? res.init_digest : model_digest(model, store);
  return res;
}

}  // namespace infinisim
