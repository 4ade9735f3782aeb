#pragma once

// Parameter sharding across simulated data-parallel ranks and the collectives
// that move shards: allgather, reduce-scatter and the single-owner broadcast
// baseline. A rank is an index; all ranks live in one process.

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/tier_store.hpp"

namespace infinisim {

struct PartitionedTensor {
  std::string key;
  std::size_t full_len = 0;
  DType dtype = DType::F32;
  std::size_t world_size = 1;
  std::size_t shard_len = 0;
  TierKind tier = TierKind::Host;

  std::string shard_key(std::size_t rank) const { return key + "/rank" + std::to_string(rank); }
  std::size_t shard_bytes() const { return shard_len * dtype_size(dtype); }
  std::size_t padding() const { return world_size * shard_len - full_len; }

  static PartitionedTensor describe(std::string key, std::size_t full_len, DType dtype, std::size_t world,
                                    TierKind tier) {
    if (full_len == 0) throw ShapeError("partition of '" + key + "': empty tensor");
    if (world == 0) throw DomainError("partition of '" + key + "': world size must be >= 1");
    return {std::move(key), full_len, dtype, world, (full_len + world - 1) / world, tier};
  }
};

/// Bytes moved on behalf of each rank by one collective.
struct CollectiveStats {
  std::vector<std::uint64_t> bytes_per_rank;

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto b : bytes_per_rank) s += b;
    return s;
  }
};

/// Shard r of `full`, zero-padded to shard_len.
inline Tensor shard_of(const Tensor& full, const PartitionedTensor& pt, std::size_t rank) {
  Tensor out(pt.dtype, pt.shard_len);
  const std::size_t begin = rank * pt.shard_len;
  if (begin < pt.full_len) {
    const std::size_t n = std::min(pt.shard_len, pt.full_len - begin);
    const std::size_t es = dtype_size(pt.dtype);
    std::memcpy(out.bytes().data(), full.bytes().data() + begin * es, n * es);
  }
  return out;
}

/// Writes every shard of `full` to `tier` and waits for completion.
inline PartitionedTensor partition(const std::string& key, const Tensor& full, std::size_t world, TierKind tier,
                                   TierStore& store) {
  auto pt = PartitionedTensor::describe(key, full.size(), full.dtype(), world, tier);
  std::vector<IoTicket> tickets;
  tickets.reserve(world);
  for (std::size_t r = 0; r < world; ++r) tickets.push_back(store.write(pt.shard_key(r), shard_of(full, pt, r), tier));
  flush(tickets);
  return pt;
}

/// Writes already-sharded data (e.g. reduce_scatter output) under pt's shard keys.
inline void write_shards(const PartitionedTensor& pt, std::span<const Tensor> shards, TierStore& store) {
  if (shards.size() != pt.world_size) throw ShapeError("write_shards: need one shard per rank");
  std::vector<IoTicket> tickets;
  for (std::size_t r = 0; r < shards.size(); ++r) {
    if (shards[r].size() != pt.shard_len || shards[r].dtype() != pt.dtype) {
      throw ShapeError("write_shards: shard " + std::to_string(r) + " of '" + pt.key + "' has wrong shape");
    }
    tickets.push_back(store.write(pt.shard_key(r), shards[r], pt.tier));
  }
  flush(tickets);
}

inline void remove_shards(const PartitionedTensor& pt, TierStore& store) {
  for (std::size_t r = 0; r < pt.world_size; ++r) store.remove(pt.shard_key(r), pt.tier);
}

/// Every rank contributes its shard; the concatenation truncated to full_len is
/// returned. All reads are issued before the first wait.
inline Tensor allgather(const PartitionedTensor& pt, TierStore& store, CollectiveStats* stats = nullptr) {
  std::vector<IoTicket> tickets;
  tickets.reserve(pt.world_size);
  for (std::size_t r = 0; r < pt.world_size; ++r) tickets.push_back(store.read(pt.shard_key(r), pt.tier));
  flush(tickets);
  Tensor full(pt.dtype, pt.full_len);
  const std::size_t es = dtype_size(pt.dtype);
  if (stats) stats->bytes_per_rank.assign(pt.world_size, 0);
  for (std::size_t r = 0; r < pt.world_size; ++r) {
    const Tensor& s = tickets[r].data();
    if (s.dtype() != pt.dtype || s.size() != pt.shard_len) {
      throw ShapeError("allgather of '" + pt.key + "': shard " + std::to_string(r) + " has wrong shape");
    }
    const std::size_t begin = r * pt.shard_len;
    if (begin < pt.full_len) {
      const std::size_t n = std::min(pt.shard_len, pt.full_len - begin);
      std::memcpy(full.bytes().data() + begin * es, s.bytes().data(), n * es);
    }
    if (stats) stats->bytes_per_rank[r] = s.nbytes();
  }
  return full;
}

namespace detail {

template <typename Acc, typename T, typename Load, typename Store>
std::vector<Tensor> reduce_scatter_impl(std::span<const Tensor> contribs, std::size_t world, DType dtype, Load load,
                                        Store store_fn) {
  const std::size_t len = contribs.front().size();
  const std::size_t shard_len = (len + world - 1) / world;
  std::vector<Tensor> out;
  out.reserve(world);
  for (std::size_t r = 0; r < world; ++r) {
    Tensor shard(dtype, shard_len);
    auto dst = shard.template as<T>();
    for (std::size_t i = 0; i < shard_len; ++i) {
      const std::size_t g = r * shard_len + i;
      Acc acc{};
      if (g < len) {
        for (const auto& c : contribs) acc += load(c.template as<T>()[g]);
      }
      dst[i] = store_fn(acc);
    }
    out.push_back(std::move(shard));
  }
  return out;
}

}  // namespace detail

/// Elementwise sum of all contributions, returned as one zero-padded shard per rank.
/// Contributions are summed strictly in the order given, so the result does not
/// depend on how many ranks produced them. fp16 inputs accumulate in fp32 and are
/// rounded once at the end.
inline std::vector<Tensor> reduce_scatter(std::span<const Tensor> contribs, std::size_t world) {
  if (world == 0) throw DomainError("reduce_scatter: world size must be >= 1");
  if (contribs.empty()) throw ShapeError("reduce_scatter: no contributions");
  const DType dtype = contribs.front().dtype();
  const std::size_t len = contribs.front().size();
  for (const auto& c : contribs) {
    if (c.dtype() != dtype || c.size() != len) throw ShapeError("reduce_scatter: contributions differ in length or dtype");
  }
  switch (dtype) {
    case DType::F64:
      return detail::reduce_scatter_impl<double, double>(
          contribs, world, dtype, [](double v) { return v; }, [](double v) { return v; });
    case DType::F32:
      return detail::reduce_scatter_impl<float, float>(
          contribs, world, dtype, [](float v) { return v; }, [](float v) { return v; });
    case DType::F16:
      return detail::reduce_scatter_impl<float, Half>(
          contribs, world, dtype, [](Half v) { return to_float(v); }, [](float v) { return to_half(v); });
  }
  throw DomainError("reduce_scatter: unknown dtype");
}

inline std::vector<Tensor> reduce_scatter(const std::vector<Tensor>& contribs, std::size_t world) {
  return reduce_scatter(std::span<const Tensor>(contribs), world);
}

/// Baseline fetch of a tensor stored whole under one owner key: every byte crosses
/// the owner's (rank 0) path, then is broadcast.
inline Tensor broadcast_fetch(const std::string& owner_key, TierKind tier, std::size_t world, TierStore& store,
                              CollectiveStats* stats = nullptr) {
  if (world == 0) throw DomainError("broadcast_fetch: world size must be >= 1");
  Tensor full = store.read(owner_key, tier).take();
  if (stats) {
    stats->bytes_per_rank.assign(world, 0);
    stats->bytes_per_rank[0] = full.nbytes();
  }
  return full;
}

}  // namespace infinisim
