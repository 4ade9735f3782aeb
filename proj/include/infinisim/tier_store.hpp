#pragma once

// Capacity-enforced device / host / NVMe-file storage with asynchronous bulk
// reads and writes, explicit flush, and a fixed pool of staging buffers that
// every NVMe transfer is chunked through.
//
// Shard file layout (little-endian):
//   0  magic "ZINF"
//   4  u32 version = 1
//   8  u8  dtype (0 f32, 1 f16, 2 f64)
//   9  3 reserved zero bytes
//   12 u64 element count
//   20 payload

#include <algorithm>
#include <atomic>
#include <bit>
#include <condition_variable>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <sys/types.h>

#include "infinisim/error.hpp"
#include "infinisim/placement_planner.hpp"
#include "infinisim/tensor.hpp"

namespace infinisim {

static_assert(std::endian::native == std::endian::little, "shard files are written in host byte order");

inline constexpr char kShardMagic[4] = {'Z', 'I', 'N', 'F'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderSize = 20;

struct ShardHeader {
  DType dtype = DType::F32;
  std::uint64_t count = 0;

  std::array<std::byte, kShardHeaderSize> encode() const {
    std::array<std::byte, kShardHeaderSize> h{};
    std::memcpy(h.data(), kShardMagic, 4);
    std::memcpy(h.data() + 4, &kShardVersion, 4);
    h[8] = static_cast<std::byte>(dtype);
    std::memcpy(h.data() + 12, &count, 8);
    return h;
  }

  static ShardHeader decode(std::span<const std::byte, kShardHeaderSize> h, const std::string& what) {
    if (std::memcmp(h.data(), kShardMagic, 4) != 0) throw IoError(what + ": bad shard magic");
    std::uint32_t version = 0;
    std::memcpy(&version, h.data() + 4, 4);
    if (version != kShardVersion) throw IoError(what + ": unsupported shard version " + std::to_string(version));
    const auto code = static_cast<std::uint8_t>(h[8]);
    if (code > 2) throw IoError(what + ": unknown dtype code " + std::to_string(code));
    if (h[9] != std::byte{0} || h[10] != std::byte{0} || h[11] != std::byte{0}) {
      throw IoError(what + ": nonzero reserved bytes");
    }
    ShardHeader out;
    out.dtype = static_cast<DType>(code);
    std::memcpy(&out.count, h.data() + 12, 8);
    return out;
  }
};

/// Percent-encodes everything outside [A-Za-z0-9._-].
inline std::string shard_filename(const std::string& key) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char ch : key) {
    if (std::isalnum(ch) || ch == '.' || ch == '_' || ch == '-') {
      out.push_back(static_cast<char>(ch));
    } else {
      out.push_back('%');
      out.push_back(hex[ch >> 4]);
      out.push_back(hex[ch & 0xf]);
    }
  }
  return out + ".shard";
}

/// Fixed set of equally sized staging buffers. Never allocates after construction.
class BufferPool {
 public:
  enum class Policy { Block, Fail };

  class Lease {
   public:
    Lease() = default;
    Lease(const Lease&) = delete;
    Lease& operator=(const Lease&) = delete;
    Lease(Lease&& o) noexcept : pool_(std::exchange(o.pool_, nullptr)), index_(o.index_) {}
    Lease& operator=(Lease&& o) noexcept {
      if (this != &o) {
        release();
        pool_ = std::exchange(o.pool_, nullptr);
        index_ = o.index_;
      }
      return *this;
    }
    ~Lease() { release(); }

    std::span<std::byte> data() const noexcept { return pool_->buffer(index_); }
    explicit operator bool() const noexcept { return pool_ != nullptr; }

    void release() noexcept {
      if (pool_) std::exchange(pool_, nullptr)->give_back(index_);
    }

   private:
    friend class BufferPool;
    Lease(BufferPool* pool, std::size_t index) : pool_(pool), index_(index) {}
    BufferPool* pool_ = nullptr;
    std::size_t index_ = 0;
  };

  BufferPool(std::size_t buffer_size, std::size_t buffer_count, Policy policy = Policy::Block)
      : buffer_size_(buffer_size), buffer_count_(buffer_count), policy_(policy), storage_(buffer_size * buffer_count) {
    if (buffer_size == 0 || buffer_count == 0) throw DomainError("buffer pool: size and count must be > 0");
    free_.reserve(buffer_count);
    for (std::size_t i = buffer_count; i-- > 0;) free_.push_back(i);
  }

  BufferPool(const BufferPool&) = delete;
  BufferPool& operator=(const BufferPool&) = delete;

  /// Blocks or throws CapacityExceeded when every buffer is leased, per the pool policy.
  Lease acquire() {
    std::unique_lock lock(mutex_);
    if (free_.empty()) {
      if (policy_ == Policy::Fail) throw CapacityExceeded("buffer pool exhausted");
      ++waits_;
      cv_.wait(lock, [&] { return !free_.empty(); });
    }
    return take(lock);
  }

  std::optional<Lease> try_acquire() {
    std::unique_lock lock(mutex_);
    if (free_.empty()) return std::nullopt;
    return take(lock);
  }

  std::size_t buffer_size() const noexcept { return buffer_size_; }
  std::size_t buffer_count() const noexcept { return buffer_count_; }
  std::size_t pooled_bytes() const noexcept { return storage_.size(); }
  Policy policy() const noexcept { return policy_; }

  std::size_t free_count() const {
    std::lock_guard lock(mutex_);
    return free_.size();
  }
  std::size_t acquired_count() const {
    std::lock_guard lock(mutex_);
    return buffer_count_ - free_.size();
  }
  std::uint64_t waits() const {
    std::lock_guard lock(mutex_);
    return waits_;
  }

 private:
  Lease take(std::unique_lock<std::mutex>&) {
    const std::size_t idx = free_.back();
    free_.pop_back();
    return Lease(this, idx);
  }

  std::span<std::byte> buffer(std::size_t i) noexcept {
    return {storage_.data() + i * buffer_size_, buffer_size_};
  }

  void give_back(std::size_t i) noexcept {
    {
      std::lock_guard lock(mutex_);
      free_.push_back(i);
    }
    cv_.notify_one();
  }

  std::size_t buffer_size_;
  std::size_t buffer_count_;
  Policy policy_;
  std::vector<std::byte> storage_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::size_t> free_;
  std::uint64_t waits_ = 0;
};

enum class IoKind { Read, Write };

/// Handle to one asynchronous store operation. Completes exactly once.
class IoTicket {
 public:
  IoTicket() = default;

  std::uint64_t id() const { return state_->id; }
  IoKind kind() const { return state_->kind; }
  const std::string& key() const { return state_->key; }
  TierKind tier() const { return state_->tier; }

  bool done() const {
    std::lock_guard lock(state_->mutex);
    return state_->done;
  }

  /// Blocks until completion; rethrows the operation's error.
  void wait() const {
    std::unique_lock lock(state_->mutex);
    state_->cv.wait(lock, [&] { return state_->done; });
    if (state_->error) std::rethrow_exception(state_->error);
  }

  /// Data of a completed read.
  const Tensor& data() const {
    wait();
    if (state_->kind != IoKind::Read) throw Error("ticket for '" + state_->key + "' is not a read");
    return state_->data;
  }

  Tensor take() const {
    wait();
    if (state_->kind != IoKind::Read) throw Error("ticket for '" + state_->key + "' is not a read");
    return std::move(state_->data);
  }

 private:
  friend class TierStore;

  struct State {
    std::uint64_t id = 0;
    IoKind kind = IoKind::Read;
    std::string key;
    TierKind tier = TierKind::Device;
    mutable std::mutex mutex;
    std::condition_variable cv;
    bool done = false;
    std::exception_ptr error;
    Tensor data;
  };

  explicit IoTicket(std::shared_ptr<State> s) : state_(std::move(s)) {}

  void complete(std::exception_ptr err = nullptr) const {
    {
      std::lock_guard lock(state_->mutex);
      state_->error = err;
      state_->done = true;
    }
    state_->cv.notify_all();
  }

  std::shared_ptr<State> state_;
};

/// Waits for every ticket, then rethrows the first error in argument order.
inline void flush(std::span<const IoTicket> tickets) {
  std::exception_ptr first;
  for (const auto& t : tickets) {
    try {
      t.wait();
    } catch (...) {
      if (!first) first = std::current_exception();
    }
  }
  if (first) std::rethrow_exception(first);
}

inline void flush(std::initializer_list<IoTicket> tickets) {
  flush(std::span<const IoTicket>(tickets.begin(), tickets.size()));
}

struct TierCapacities {
  std::uint64_t device = std::uint64_t{1} << 40;
  std::uint64_t host = std::uint64_t{1} << 40;
  std::uint64_t nvme = std::uint64_t{1} << 44;

  std::uint64_t of(TierKind t) const noexcept {
    return t == TierKind::Device ? device : t == TierKind::Host ? host : nvme;
  }
};

struct PoolSpec {
  std::size_t buffer_size = 4u << 20;
  std::size_t buffer_count = 8;
  BufferPool::Policy policy = BufferPool::Policy::Block;
};

struct StoreOptions {
  TierCapacities capacities;
  std::filesystem::path nvme_root;
  PoolSpec pool;
  bool sync_io = false;     ///< service every request on the calling thread
  unsigned io_workers = 4;  ///< background workers when !sync_io
};

struct TierStats {
  std::uint64_t used = 0;
  std::uint64_t capacity = 0;
  std::uint64_t peak_used = 0;
  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
};

struct StoreStats {
  std::array<TierStats, 3> tiers{};
  std::uint64_t buffer_waits = 0;
  std::size_t buffers_acquired = 0;
  std::size_t buffers_free = 0;

  const TierStats& operator[](TierKind t) const { return tiers[static_cast<std::size_t>(t)]; }
};

/// `configured` unless INFINISIM_NVME_ROOT is set.
inline std::filesystem::path resolve_nvme_root(const std::filesystem::path& configured) {
  if (const char* env = std::getenv("INFINISIM_NVME_ROOT"); env && *env) return env;
  return configured;
}

class TierStore {
 public:
  explicit TierStore(StoreOptions opts)
      : opts_(std::move(opts)), pool_(opts_.pool.buffer_size, opts_.pool.buffer_count, opts_.pool.policy) {
    for (TierKind t : kAllTiers) {
      tier(t).capacity = opts_.capacities.of(t);
    }
    if (opts_.nvme_root.empty()) throw IoError("nvme_root is empty");
    std::error_code ec;
    std::filesystem::create_directories(opts_.nvme_root, ec);
    if (ec || !std::filesystem::is_directory(opts_.nvme_root)) {
      throw IoError("cannot create nvme_root '" + opts_.nvme_root.string() + "'");
    }
    const auto probe = opts_.nvme_root / ".write_probe";
    {
      std::ofstream f(probe, std::ios::binary);
      if (!f) throw IoError("nvme_root '" + opts_.nvme_root.string() + "' is not writable");
    }
    std::filesystem::remove(probe, ec);
    if (!opts_.sync_io) {
      const unsigned n = std::max(1u, opts_.io_workers);
      for (unsigned i = 0; i < n; ++i) workers_.emplace_back([this] { worker_loop(); });
    }
  }

  TierStore(const TierStore&) = delete;
  TierStore& operator=(const TierStore&) = delete;

  ~TierStore() {
    {
      std::lock_guard lock(queue_mutex_);
      stopping_ = true;
    }
    queue_cv_.notify_all();
    workers_.clear();  // jthread joins after the queue drains
  }

  const std::filesystem::path& nvme_root() const noexcept { return opts_.nvme_root; }
  BufferPool& pool() noexcept { return pool_; }
  bool sync_io() const noexcept { return opts_.sync_io; }

  std::filesystem::path shard_path(const std::string& key) const { return opts_.nvme_root / shard_filename(key); }

  IoTicket write(const std::string& key, const Tensor& data, TierKind t) {
    check_key(key);
    if (data.empty()) throw ShapeError("write of '" + key + "': data is empty");
    auto ticket = make_ticket(IoKind::Write, key, t);
    std::unique_lock lock(mutex_);
    auto& ts = tier(t);
    const std::uint64_t old = ts.accounted.count(key) ? ts.accounted[key] : 0;
    const std::uint64_t next = ts.used - old + data.nbytes();
    if (next > ts.capacity) {
      throw CapacityExceeded("write of '" + key + "' (" + std::to_string(data.nbytes()) + " bytes) exceeds " +
                             std::string(tier_name(t)) + " capacity " + std::to_string(ts.capacity));
    }
    set_used(ts, next);
    ts.accounted[key] = data.nbytes();
    const std::uint64_t version = ++versions_[key_id(t, key)];

    if (t != TierKind::Nvme) {
      ts.resident[key] = data;
      ts.meta[key] = Meta{data.dtype(), data.size()};
      ts.floor[key] = version;
      ts.bytes_written += data.nbytes();
      lock.unlock();
      ticket.complete();
      return ticket;
    }
    lock.unlock();
    submit([this, ticket, key, data, version] { nvme_write(ticket, key, data, version); });
    return ticket;
  }

  IoTicket read(const std::string& key, TierKind t) { return read_range_impl(key, t, 0, std::nullopt); }

  /// Elements [offset, offset + count) of a stored key.
  IoTicket read_range(const std::string& key, TierKind t, std::size_t offset, std::size_t count) {
    return read_range_impl(key, t, offset, count);
  }

  /// Overwrites elements starting at `offset` in place. Same dtype, within bounds.
  /// Not atomic with respect to concurrent readers of the same key.
  IoTicket update_range(const std::string& key, TierKind t, std::size_t offset, const Tensor& data) {
    check_key(key);
    auto ticket = make_ticket(IoKind::Write, key, t);
    std::unique_lock lock(mutex_);
    const auto meta = committed_meta(key, t);
    if (meta.dtype != data.dtype()) throw ShapeError("update of '" + key + "': dtype mismatch");
    if (offset + data.size() > meta.count) throw ShapeError("update of '" + key + "': range out of bounds");
    auto& ts = tier(t);
    if (t != TierKind::Nvme) {
      auto& dst = ts.resident[key];
      std::memcpy(dst.bytes().data() + offset * dtype_size(data.dtype()), data.bytes().data(), data.nbytes());
      ts.bytes_written += data.nbytes();
      lock.unlock();
      ticket.complete();
      return ticket;
    }
    lock.unlock();
    submit([this, ticket, key, data, offset] { nvme_update(ticket, key, offset, data); });
    return ticket;
  }

  /// Deletes a key from a tier. Pending writes issued earlier are discarded.
  void remove(const std::string& key, TierKind t) {
    std::lock_guard lock(mutex_);
    auto& ts = tier(t);
    const bool known = ts.accounted.count(key) > 0;
    if (!known) throw KeyNotFound("'" + key + "' not in " + std::string(tier_name(t)));
    set_used(ts, ts.used - ts.accounted[key]);
    ts.accounted.erase(key);
    ts.floor[key] = ++versions_[key_id(t, key)];
    ts.meta.erase(key);
    ts.resident.erase(key);
    if (t == TierKind::Nvme) {
      std::error_code ec;
      std::filesystem::remove(shard_path(key), ec);
    }
  }

  /// read + write + remove. Destination capacity is checked before anything moves.
  IoTicket move(const std::string& key, TierKind from, TierKind to) {
    check_key(key);
    if (from == to) {
      std::lock_guard lock(mutex_);
      (void)committed_meta(key, from);
      auto ticket = make_ticket(IoKind::Write, key, to);
      ticket.complete();
      return ticket;
    }
    std::uint64_t bytes = 0;
    {
      std::lock_guard lock(mutex_);
      const auto meta = committed_meta(key, from);
      bytes = meta.count * dtype_size(meta.dtype);
      const auto& dst = tier(to);
      const std::uint64_t old = dst.accounted.count(key) ? dst.accounted.at(key) : 0;
      if (dst.used - old + bytes > dst.capacity) {
        throw CapacityExceeded("move of '" + key + "' to " + std::string(tier_name(to)) + " exceeds capacity");
      }
    }
    Tensor data = read(key, from).take();
    auto w = write(key, data, to);
    w.wait();
    remove(key, from);
    return w;
  }

  bool contains(const std::string& key, TierKind t) const {
    std::lock_guard lock(mutex_);
    return tier(t).meta.count(key) > 0;
  }

  std::vector<std::string> keys(TierKind t) const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [k, _] : tier(t).meta) out.push_back(k);
    return out;
  }

  StoreStats stats() const {
    StoreStats s;
    {
      std::lock_guard lock(mutex_);
      for (TierKind t : kAllTiers) {
        const auto& ts = tier(t);
        s.tiers[static_cast<std::size_t>(t)] = {ts.used, ts.capacity, ts.peak_used, ts.bytes_read, ts.bytes_written};
      }
    }
    s.buffer_waits = pool_.waits();
    s.buffers_acquired = pool_.acquired_count();
    s.buffers_free = pool_.free_count();
    return s;
  }

  /// Restarts peak tracking at the current usage.
  void reset_peaks() {
    std::lock_guard lock(mutex_);
    for (TierKind t : kAllTiers) tier(t).peak_used = tier(t).used;
  }

 private:
  struct Meta {
    DType dtype = DType::F32;
    std::uint64_t count = 0;
  };

  struct Tier {
    std::uint64_t capacity = 0;
    std::uint64_t used = 0;
    std::uint64_t peak_used = 0;
    std::uint64_t bytes_read = 0;
    std::uint64_t bytes_written = 0;
    std::map<std::string, std::uint64_t> accounted;  // bytes charged per key, latest issued write
    std::map<std::string, Meta> meta;                // committed, readable keys
    std::map<std::string, std::uint64_t> floor;      // version of the last commit or removal
    std::map<std::string, Tensor> resident;          // device and host payloads
  };

  static void check_key(const std::string& key) {
    if (key.empty() || key.size() > 200 || key.find('\0') != std::string::npos) {
      throw DomainError("malformed key '" + key + "'");
    }
  }

  static std::string key_id(TierKind t, const std::string& key) {
    return std::to_string(static_cast<int>(t)) + ":" + key;
  }

  Tier& tier(TierKind t) { return tiers_[static_cast<std::size_t>(t)]; }
  const Tier& tier(TierKind t) const { return tiers_[static_cast<std::size_t>(t)]; }

  static void set_used(Tier& ts, std::uint64_t v) {
    ts.used = v;
    ts.peak_used = std::max(ts.peak_used, v);
  }

  // Caller holds mutex_.
  Meta committed_meta(const std::string& key, TierKind t) const {
    const auto& ts = tier(t);
    auto it = ts.meta.find(key);
    if (it == ts.meta.end()) throw KeyNotFound("'" + key + "' not in " + std::string(tier_name(t)));
    return it->second;
  }

  IoTicket make_ticket(IoKind kind, const std::string& key, TierKind t) {
    auto s = std::make_shared<IoTicket::State>();
    s->id = next_ticket_.fetch_add(1) + 1;
    s->kind = kind;
    s->key = key;
    s->tier = t;
    return IoTicket(std::move(s));
  }

  IoTicket read_range_impl(const std::string& key, TierKind t, std::size_t offset, std::optional<std::size_t> count) {
    check_key(key);
    auto ticket = make_ticket(IoKind::Read, key, t);
    std::unique_lock lock(mutex_);
    const auto meta = committed_meta(key, t);
    const std::size_t n = count.value_or(meta.count - std::min<std::uint64_t>(offset, meta.count));
    if (offset + n > meta.count) throw ShapeError("read of '" + key + "': range out of bounds");
    auto& ts = tier(t);
    if (t != TierKind::Nvme) {
      const auto& src = ts.resident.at(key);
      ticket.state_->data = (offset == 0 && n == src.size()) ? src : src.slice(offset, n);
      ts.bytes_read += ticket.state_->data.nbytes();
      lock.unlock();
      ticket.complete();
      return ticket;
    }
    lock.unlock();
    submit([this, ticket, key, offset, n] { nvme_read(ticket, key, offset, n); });
    return ticket;
  }

  void submit(std::function<void()> task) {
    if (opts_.sync_io) {
      task();
      return;
    }
    {
      std::lock_guard lock(queue_mutex_);
      queue_.push_back(std::move(task));
    }
    queue_cv_.notify_one();
  }

  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lock(queue_mutex_);
        queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  // Payloads cross the file boundary only through pool buffers.
  void stream_out(std::span<const std::byte> bytes, std::FILE* f, const std::string& what) {
    std::size_t off = 0;
    while (off < bytes.size()) {
      auto lease = pool_.acquire();
      const std::size_t n = std::min(lease.data().size(), bytes.size() - off);
      std::memcpy(lease.data().data(), bytes.data() + off, n);
      if (std::fwrite(lease.data().data(), 1, n, f) != n) throw IoError(what + ": short write");
      off += n;
    }
  }

  void stream_in(std::span<std::byte> bytes, std::FILE* f, const std::string& what) {
    std::size_t off = 0;
    while (off < bytes.size()) {
      auto lease = pool_.acquire();
      const std::size_t n = std::min(lease.data().size(), bytes.size() - off);
      if (std::fread(lease.data().data(), 1, n, f) != n) throw IoError(what + ": truncated shard");
      std::memcpy(bytes.data() + off, lease.data().data(), n);
      off += n;
    }
  }

  struct FileCloser {
    void operator()(std::FILE* f) const noexcept { std::fclose(f); }
  };
  using File = std::unique_ptr<std::FILE, FileCloser>;

  static File open_file(const std::filesystem::path& p, const char* mode, const std::string& what) {
    File f(std::fopen(p.c_str(), mode));
    if (!f) throw IoError(what + ": cannot open " + p.string());
    return f;
  }

  ShardHeader read_header(std::FILE* f, const std::string& what) {
    std::array<std::byte, kShardHeaderSize> h{};
    if (std::fread(h.data(), 1, h.size(), f) != h.size()) throw IoError(what + ": truncated shard header");
    return ShardHeader::decode(h, what);
  }

  void nvme_write(IoTicket ticket, const std::string& key, const Tensor& data, std::uint64_t version) {
    const auto final_path = shard_path(key);
    const auto tmp = final_path.string() + ".tmp." + std::to_string(ticket.id());
    const std::string what = "write of '" + key + "'";
    try {
      {
        File f = open_file(tmp, "wb", what);
        const auto header = ShardHeader{data.dtype(), data.size()}.encode();
        stream_out(header, f.get(), what);
        stream_out(data.bytes(), f.get(), what);
        if (std::fflush(f.get()) != 0) throw IoError(what + ": flush failed");
      }
      std::unique_lock lock(mutex_);
      auto& ts = tier(TierKind::Nvme);
      ts.bytes_written += kShardHeaderSize + data.nbytes();
      if (version >= ts.floor[key] && version == versions_[key_id(TierKind::Nvme, key)]) {
        std::error_code ec;
        std::filesystem::rename(tmp, final_path, ec);
        if (ec) throw IoError(what + ": rename failed: " + ec.message());
        ts.floor[key] = version;
        ts.meta[key] = Meta{data.dtype(), data.size()};
      } else {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);  // superseded by a newer write or a removal
      }
      lock.unlock();
      ticket.complete();
    } catch (...) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      {
        std::lock_guard lock(mutex_);
        auto& ts = tier(TierKind::Nvme);
        if (version == versions_[key_id(TierKind::Nvme, key)]) {
          // roll the charge back to whatever is committed
          const std::uint64_t charged = ts.accounted.count(key) ? ts.accounted[key] : 0;
          auto it = ts.meta.find(key);
          const std::uint64_t committed = it == ts.meta.end() ? 0 : it->second.count * dtype_size(it->second.dtype);
          set_used(ts, ts.used - charged + committed);
          if (it == ts.meta.end()) ts.accounted.erase(key);
          else ts.accounted[key] = committed;
        }
      }
      ticket.complete(std::current_exception());
    }
  }

  void nvme_read(IoTicket ticket, const std::string& key, std::size_t offset, std::size_t count) {
    const std::string what = "read of '" + key + "'";
    try {
      File f = open_file(shard_path(key), "rb", what);
      const ShardHeader h = read_header(f.get(), what);
      if (offset + count > h.count) throw IoError(what + ": shard shorter than indexed");
      const std::size_t es = dtype_size(h.dtype);
      if (offset && fseeko(f.get(), static_cast<off_t>(kShardHeaderSize + offset * es), SEEK_SET) != 0) {
        throw IoError(what + ": seek failed");
      }
      Tensor out(h.dtype, count);
      stream_in(out.bytes(), f.get(), what);
      {
        std::lock_guard lock(mutex_);
        tier(TierKind::Nvme).bytes_read += kShardHeaderSize + out.nbytes();
      }
      ticket.state_->data = std::move(out);
      ticket.complete();
    } catch (...) {
      ticket.complete(std::current_exception());
    }
  }

  void nvme_update(IoTicket ticket, const std::string& key, std::size_t offset, const Tensor& data) {
    const std::string what = "update of '" + key + "'";
    try {
      File f = open_file(shard_path(key), "r+b", what);
      const ShardHeader h = read_header(f.get(), what);
      if (h.dtype != data.dtype() || offset + data.size() > h.count) throw IoError(what + ": shard layout changed");
      const std::size_t es = dtype_size(h.dtype);
      if (fseeko(f.get(), static_cast<off_t>(kShardHeaderSize + offset * es), SEEK_SET) != 0) {
        throw IoError(what + ": seek failed");
      }
      stream_out(data.bytes(), f.get(), what);
      if (std::fflush(f.get()) != 0) throw IoError(what + ": flush failed");
      {
        std::lock_guard lock(mutex_);
        tier(TierKind::Nvme).bytes_written += data.nbytes();
      }
      ticket.complete();
    } catch (...) {
      ticket.complete(std::current_exception());
    }
  }

  StoreOptions opts_;
  BufferPool pool_;
  mutable std::mutex mutex_;
  std::array<Tier, 3> tiers_;
  std::map<std::string, std::uint64_t> versions_;
  std::atomic<std::uint64_t> next_ticket_{0};

  std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::vector<std::jthread> workers_;  // last member: joined first on destruction
};

}  // namespace infinisim
