#pragma once

// Handle State Cache: the engine-internal allowlist. 64 sets x 2 ways indexed
// by the low 6 IV bits; each way stores the 90-bit IV tag, the 64-bit binding
// id and the 8-bit lifetime counter. Validity lives in a separate 128-bit
// register (bit = set * 2 + way), as do the two binding-kind bits per way.
//
// Revocation only clears the validity bit. The way is immediately free for
// the next insert into that set, but its tag stays until overwritten, so a
// revoked handle looks up as "present, invalid" rather than as a miss.
//
// With a storage key the cache spills LRU entries into a SwapRegion living in
// untrusted memory. Region wire format (little-endian):
//   u32 record count
//   record * count:
//     u8  set index
//     12  cache tag (u64 low bits, u32 high bits)
//     u64 seal version
//     10  sealed payload: u64 binding id | u8 counter | u8 flags
//     16  GCM tag, aad = set index | cache tag | seal version
//   u64 region version
//   16  region MAC (GMAC over all preceding bytes)
// Record nonces are (seal version, 0x00), region MAC nonces (version, 0x01).
// The engine keeps the expected (version, MAC) pair; any mismatch on swap-in
// is a rollback or tamper and raises RollbackDetected.

#include <array>
#include <bitset>
#include <cstdint>
#include <optional>
#include <vector>

#include "khe/aead.hpp"
#include "khe/codec.hpp"

namespace khe {

inline constexpr std::size_t kHscSets = 64;
inline constexpr std::size_t kHscWays = 2;
inline constexpr std::size_t kHscSlots = kHscSets * kHscWays;
inline constexpr std::size_t kHscTagBits = 90;
inline constexpr std::size_t kHscEntryBits = kHscTagBits + 64 + 8;

enum class BindingKind : std::uint8_t { None = 0, Process = 1, Pmp = 2 };

struct HscEntry {
  CacheTag cache_tag;
  std::uint64_t binding_id = 0;
  std::uint8_t counter = 0;

  friend bool operator==(const HscEntry&, const HscEntry&) = default;
};

struct HscSlot {
  std::uint8_t set = 0;
  std::uint8_t way = 0;

  std::size_t validity_bit() const noexcept { return std::size_t{set} * kHscWays + way; }
  friend bool operator==(const HscSlot&, const HscSlot&) = default;
};

struct HscLookup {
  HscEntry entry;
  bool valid = false;
  BindingKind binding = BindingKind::None;
  HscSlot slot;
};

struct SwapRecord {
  static constexpr std::size_t kPayloadSize = 10;
  static constexpr std::size_t kEncodedSize = 1 + 12 + 8 + kPayloadSize + 16;

  std::uint8_t set_index = 0;
  CacheTag cache_tag;
  std::uint64_t seal_version = 0;
  std::array<std::uint8_t, kPayloadSize> sealed{};
  AuthTag tag;

  friend bool operator==(const SwapRecord&, const SwapRecord&) = default;
};

/// Untrusted spill area. Anyone may read or overwrite it.
struct SwapRegion {
  std::vector<SwapRecord> records;
  std::uint64_t version = 0;
  AuthTag mac;

  friend bool operator==(const SwapRegion&, const SwapRegion&) = default;
};

namespace detail {

inline void put_tag(Bytes& out, const CacheTag& t) {
  std::uint8_t buf[12];
  store_le64(buf, t.low);
  for (int i = 0; i < 4; ++i) buf[8 + i] = static_cast<std::uint8_t>(t.high >> (8 * i));
  out.insert(out.end(), buf, buf + 12);
}

inline CacheTag get_tag(const std::uint8_t* p) {
  CacheTag t;
  t.low = load_le64(p);
  for (int i = 3; i >= 0; --i) t.high = (t.high << 8) | p[8 + i];
  return t;
}

inline Nonce96 swap_nonce(std::uint64_t version, std::uint8_t domain) {
  Nonce96 n;
  store_le64(n.data(), version);
  n.bytes[8] = domain;
  return n;
}

inline Bytes record_aad(std::uint8_t set, const CacheTag& tag, std::uint64_t version) {
  Bytes aad{set};
  put_tag(aad, tag);
  std::uint8_t v[8];
  store_le64(v, version);
  aad.insert(aad.end(), v, v + 8);
  return aad;
}

}  // namespace detail

/// Everything in the region except the trailing MAC.
inline Bytes encode_region_body(const SwapRegion& region) {
  Bytes out(4);
  auto count = static_cast<std::uint32_t>(region.records.size());
  for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(count >> (8 * i));
  for (const auto& r : region.records) {
    Bytes aad = detail::record_aad(r.set_index, r.cache_tag, r.seal_version);
    out.insert(out.end(), aad.begin(), aad.end());
    out.insert(out.end(), r.sealed.begin(), r.sealed.end());
    out.insert(out.end(), r.tag.bytes.begin(), r.tag.bytes.end());
  }
  std::uint8_t v[8];
  store_le64(v, region.version);
  out.insert(out.end(), v, v + 8);
  return out;
}

inline Bytes encode_region(const SwapRegion& region) {
  Bytes out = encode_region_body(region);
  out.insert(out.end(), region.mac.bytes.begin(), region.mac.bytes.end());
  return out;
}

inline SwapRegion decode_region(ByteView bytes) {
  if (bytes.size() < 4 + 8 + 16) throw Error(ErrorCode::BadLength, "swap region");
  std::uint32_t count = 0;
  for (int i = 3; i >= 0; --i) count = (count << 8) | bytes[i];
  if (bytes.size() != 4 + std::size_t{count} * SwapRecord::kEncodedSize + 8 + 16)
    throw Error(ErrorCode::BadLength, "swap region");
  SwapRegion region;
  const std::uint8_t* p = bytes.data() + 4;
  for (std::uint32_t i = 0; i < count; ++i) {
    SwapRecord r;
    r.set_index = p[0];
    r.cache_tag = detail::get_tag(p + 1);
    r.seal_version = load_le64(p + 13);
    std::copy_n(p + 21, SwapRecord::kPayloadSize, r.sealed.begin());
    std::copy_n(p + 21 + SwapRecord::kPayloadSize, 16, r.tag.bytes.begin());
    region.records.push_back(r);
    p += SwapRecord::kEncodedSize;
  }
  region.version = load_le64(p);
  std::copy_n(p + 8, 16, region.mac.bytes.begin());
  return region;
}

class HandleStateCache {
 public:
  /// Swapping is enabled iff a storage key is supplied.
  explicit HandleStateCache(std::optional<AeadKey> storage_key = std::nullopt)
      : storage_key_(std::move(storage_key)) {
    if (storage_key_) {
      region_.version = 0;
      region_.mac = compute_region_mac(region_);
      trusted_version_ = region_.version;
      trusted_mac_ = region_.mac;
    }
  }

  bool swap_enabled() const noexcept { return storage_key_.has_value(); }

  HscSlot insert(const Nonce96& iv, std::uint64_t binding_id, std::uint8_t counter,
                 BindingKind binding = BindingKind::None) {
    IvSplit s = split_iv(iv);
    for (std::uint8_t w = 0; w < kHscWays; ++w) {
      HscSlot slot{s.set_index, w};
      if (valid(slot) && ways_[slot.validity_bit()]->cache_tag == s.tag)
        throw Error(ErrorCode::DuplicateTag);
    }
    auto way = free_way(s.set_index);
    if (!way) {
      if (!swap_enabled()) throw Error(ErrorCode::SetFull);
      std::uint8_t victim = lru_way(s.set_index);
      swap_out(s.set_index, victim);
      way = victim;
    }
    HscSlot slot{s.set_index, *way};
    place(slot, HscEntry{s.tag, binding_id, counter}, binding);
    return slot;
  }

  /// Finds the way holding this IV's tag, swapping it in from the region on
  /// a cache miss. nullopt is a Miss. Valid hits refresh the LRU bit.
  std::optional<HscLookup> lookup(const Nonce96& iv) {
    IvSplit s = split_iv(iv);
    if (auto hit = find(s)) {
      if (hit->valid) touch(hit->slot);
      return hit;
    }
    if (swap_enabled() && swap_in(iv)) return find(s);
    return std::nullopt;
  }

  void invalidate(const Nonce96& iv) {
    auto hit = lookup(iv);
    if (!hit) throw Error(ErrorCode::Miss);
    clear_valid(hit->slot);
  }

  /// Consumes one use. Reaching zero clears the validity bit in the same step.
  std::uint8_t decrement(const Nonce96& iv) {
    auto hit = lookup(iv);
    if (!hit) throw Error(ErrorCode::Miss);
    HscEntry& e = *ways_[hit->slot.validity_bit()];
    if (!hit->valid || e.counter == 0) throw Error(ErrorCode::Exhausted);
    --e.counter;
    if (e.counter == 0) clear_valid(hit->slot);
    return e.counter;
  }

  /// Invalidates every valid entry bound to `binding_id` with the given
  /// binding kind, both in the cache and in the swap region.
  std::size_t revoke_by_binding(std::uint64_t binding_id, bool pmp_mode) {
    BindingKind kind = pmp_mode ? BindingKind::Pmp : BindingKind::Process;
    std::size_t revoked = 0;
    for (std::size_t bit = 0; bit < kHscSlots; ++bit) {
      if (validity_[bit] && binding_kind(bit) == kind && ways_[bit]->binding_id == binding_id) {
        validity_.reset(bit);
        ++revoked;
      }
    }
    if (swap_enabled() && !region_.records.empty()) {
      verify_region();
      // Kept as invalid records so a later lookup still reports Revoked.
      for (auto& r : region_.records) {
        auto payload = open_record(r);
        std::uint64_t id = load_le64(payload.data());
        std::uint8_t flags = payload[9];
        if ((flags & kFlagValid) && flags_kind(flags) == kind && id == binding_id) {
          payload[9] = static_cast<std::uint8_t>(flags & ~kFlagValid);
          seal_record(r, payload);
          commit_region();  // one version per reseal keeps nonces unique
          ++revoked;
        }
        secure_wipe(payload.data(), payload.size());
      }
    }
    return revoked;
  }

  /// Seals the entry at (set, way) into the region and frees the way.
  void swap_out(std::uint8_t set, std::uint8_t way) {
    if (!swap_enabled()) throw Error(ErrorCode::SwapDisabled);
    HscSlot slot{set, way};
    std::size_t bit = slot.validity_bit();
    if (!ways_[bit] || !validity_[bit]) throw Error(ErrorCode::Miss);
    verify_region();
    const HscEntry& e = *ways_[bit];

    std::array<std::uint8_t, SwapRecord::kPayloadSize> payload{};
    store_le64(payload.data(), e.binding_id);
    payload[8] = e.counter;
    payload[9] = static_cast<std::uint8_t>(kFlagValid | kind_flags(binding_kind(bit)));

    SwapRecord r;
    r.set_index = set;
    r.cache_tag = e.cache_tag;
    seal_record(r, payload);
    region_.records.push_back(r);
    secure_wipe(payload.data(), payload.size());

    ways_[bit].reset();
    validity_.reset(bit);
    set_binding_kind(bit, BindingKind::None);
    commit_region();
  }

  /// Restores the record for this IV. Returns false if the (verified) region
  /// does not hold it.
  bool swap_in(const Nonce96& iv) {
    if (!swap_enabled()) throw Error(ErrorCode::SwapDisabled);
    verify_region();
    IvSplit s = split_iv(iv);
    auto it = std::find_if(region_.records.begin(), region_.records.end(), [&](const SwapRecord& r) {
      return r.set_index == s.set_index && r.cache_tag == s.tag;
    });
    if (it == region_.records.end()) return false;
    auto payload = open_record(*it);
    HscEntry entry{s.tag, load_le64(payload.data()), payload[8]};
    std::uint8_t flags = payload[9];
    secure_wipe(payload.data(), payload.size());
    region_.records.erase(it);
    commit_region();

    auto way = free_way(s.set_index);
    if (!way) {
      std::uint8_t victim = lru_way(s.set_index);
      swap_out(s.set_index, victim);
      way = victim;
    }
    HscSlot slot{s.set_index, *way};
    place(slot, entry, flags_kind(flags));
    if (!(flags & kFlagValid)) clear_valid(slot);
    return true;
  }

  const std::bitset<kHscSlots>& validity() const noexcept { return validity_; }

  const std::optional<HscEntry>& entry_at(HscSlot slot) const noexcept {
    return ways_[slot.validity_bit()];
  }

  bool valid(HscSlot slot) const noexcept { return validity_[slot.validity_bit()]; }

  BindingKind binding_kind(HscSlot slot) const noexcept {
    return binding_kind(slot.validity_bit());
  }

  std::size_t valid_count() const noexcept { return validity_.count(); }

  /// Least recently used way of a set.
  std::uint8_t lru_way(std::uint8_t set) const noexcept { return lru_[set] ? 1 : 0; }

  /// Untrusted memory: exposed mutably on purpose so that callers (and
  /// attack tests) can persist, replace, or corrupt it.
  SwapRegion& region() noexcept { return region_; }
  const SwapRegion& region() const noexcept { return region_; }

  std::uint64_t trusted_region_version() const noexcept { return trusted_version_; }

  // Internal-state (de)serialization for sealed engine persistence.
  Bytes serialize() const {
    Bytes out;
    auto put_bits = [&](const std::bitset<kHscSlots>& b) {
      for (std::size_t i = 0; i < kHscSlots / 8; ++i) {
        std::uint8_t byte = 0;
        for (std::size_t j = 0; j < 8; ++j)
          if (b[8 * i + j]) byte |= static_cast<std::uint8_t>(1u << j);
        out.push_back(byte);
      }
    };
    put_bits(validity_);
    put_bits(bound_);
    put_bits(pmp_);
    std::uint64_t lru = 0;
    for (std::size_t s = 0; s < kHscSets; ++s)
      if (lru_[s]) lru |= std::uint64_t{1} << s;
    std::uint8_t buf[8];
    store_le64(buf, lru);
    out.insert(out.end(), buf, buf + 8);
    for (const auto& way : ways_) {
      out.push_back(way ? 1 : 0);
      HscEntry e = way.value_or(HscEntry{});
      detail::put_tag(out, e.cache_tag);
      store_le64(buf, e.binding_id);
      out.insert(out.end(), buf, buf + 8);
      out.push_back(e.counter);
    }
    store_le64(buf, trusted_version_);
    out.insert(out.end(), buf, buf + 8);
    out.insert(out.end(), trusted_mac_.bytes.begin(), trusted_mac_.bytes.end());
    return out;
  }

  static constexpr std::size_t kSerializedSize = 3 * 16 + 8 + kHscSlots * 22 + 8 + 16;

  void deserialize(ByteView in) {
    if (in.size() != kSerializedSize) throw Error(ErrorCode::BadLength, "hsc state");
    const std::uint8_t* p = in.data();
    auto get_bits = [&](std::bitset<kHscSlots>& b) {
      for (std::size_t i = 0; i < kHscSlots; ++i) b[i] = (p[i / 8] >> (i % 8)) & 1;
      p += kHscSlots / 8;
    };
    get_bits(validity_);
    get_bits(bound_);
    get_bits(pmp_);
    std::uint64_t lru = load_le64(p);
    p += 8;
    for (std::size_t s = 0; s < kHscSets; ++s) lru_[s] = (lru >> s) & 1;
    for (auto& way : ways_) {
      bool present = p[0] != 0;
      HscEntry e{detail::get_tag(p + 1), load_le64(p + 13), p[21]};
      way = present ? std::optional<HscEntry>(e) : std::nullopt;
      p += 22;
    }
    trusted_version_ = load_le64(p);
    std::copy_n(p + 8, 16, trusted_mac_.bytes.begin());
    for (std::size_t bit = 0; bit < kHscSlots; ++bit)
      if (validity_[bit] && !ways_[bit]) throw Error(ErrorCode::InvariantViolation, "hsc state");
  }

 private:
  static constexpr std::uint8_t kFlagValid = 1u << 0;
  static constexpr std::uint8_t kFlagBound = 1u << 1;
  static constexpr std::uint8_t kFlagPmp = 1u << 2;

  static std::uint8_t kind_flags(BindingKind k) noexcept {
    switch (k) {
      case BindingKind::Process: return kFlagBound;
      case BindingKind::Pmp: return kFlagBound | kFlagPmp;
      default: return 0;
    }
  }
  static BindingKind flags_kind(std::uint8_t f) noexcept {
    if (!(f & kFlagBound)) return BindingKind::None;
    return (f & kFlagPmp) ? BindingKind::Pmp : BindingKind::Process;
  }

  BindingKind binding_kind(std::size_t bit) const noexcept {
    if (!bound_[bit]) return BindingKind::None;
    return pmp_[bit] ? BindingKind::Pmp : BindingKind::Process;
  }
  void set_binding_kind(std::size_t bit, BindingKind k) noexcept {
    bound_[bit] = k != BindingKind::None;
    pmp_[bit] = k == BindingKind::Pmp;
  }

  std::optional<HscLookup> find(const IvSplit& s) const {
    for (std::uint8_t w = 0; w < kHscWays; ++w) {
      HscSlot slot{s.set_index, w};
      const auto& way = ways_[slot.validity_bit()];
      if (way && way->cache_tag == s.tag)
        return HscLookup{*way, valid(slot), binding_kind(slot), slot};
    }
    return std::nullopt;
  }

  // Prefers never-used ways over revoked ones so stale tags survive longest.
  std::optional<std::uint8_t> free_way(std::uint8_t set) const noexcept {
    for (std::uint8_t w = 0; w < kHscWays; ++w)
      if (!ways_[HscSlot{set, w}.validity_bit()]) return w;
    for (std::uint8_t w = 0; w < kHscWays; ++w)
      if (!valid(HscSlot{set, w})) return w;
    return std::nullopt;
  }

  void place(HscSlot slot, const HscEntry& e, BindingKind k) {
    std::size_t bit = slot.validity_bit();
    ways_[bit] = e;
    validity_.set(bit);
    set_binding_kind(bit, k);
    touch(slot);
  }

  void clear_valid(HscSlot slot) noexcept { validity_.reset(slot.validity_bit()); }

  void touch(HscSlot slot) noexcept { lru_[slot.set] = slot.way == 0; }

  AuthTag compute_region_mac(const SwapRegion& region) const {
    Bytes body = encode_region_body(region);
    return seal(*storage_key_, detail::swap_nonce(region.version, 0x01), body, ByteView{}).tag;
  }

  void verify_region() const {
    if (region_.version != trusted_version_ || !(region_.mac == trusted_mac_) ||
        !(compute_region_mac(region_) == trusted_mac_))
      throw Error(ErrorCode::RollbackDetected);
  }

  /// Seals under the next region version; caller commits before sealing again.
  void seal_record(SwapRecord& r, const std::array<std::uint8_t, SwapRecord::kPayloadSize>& payload) const {
    r.seal_version = region_.version + 1;
    Sealed sealed = seal(*storage_key_, detail::swap_nonce(r.seal_version, 0x00),
                         detail::record_aad(r.set_index, r.cache_tag, r.seal_version), payload);
    std::copy(sealed.ciphertext.begin(), sealed.ciphertext.end(), r.sealed.begin());
    r.tag = sealed.tag;
  }

  std::array<std::uint8_t, SwapRecord::kPayloadSize> open_record(const SwapRecord& r) const {
    auto pt = open(*storage_key_, detail::swap_nonce(r.seal_version, 0x00),
                   detail::record_aad(r.set_index, r.cache_tag, r.seal_version), r.sealed, r.tag);
    if (!pt) throw Error(ErrorCode::RollbackDetected);
    std::array<std::uint8_t, SwapRecord::kPayloadSize> out{};
    std::copy(pt->begin(), pt->end(), out.begin());
    secure_wipe(*pt);
    return out;
  }

  void commit_region() {
    ++region_.version;
    region_.mac = compute_region_mac(region_);
    trusted_version_ = region_.version;
    trusted_mac_ = region_.mac;
  }

  std::array<std::optional<HscEntry>, kHscSlots> ways_{};
  std::bitset<kHscSlots> validity_;
  std::bitset<kHscSlots> bound_;
  std::bitset<kHscSlots> pmp_;
  std::bitset<kHscSets> lru_;  // set bit: way 1 is LRU
  std::optional<AeadKey> storage_key_;

  SwapRegion region_;
  std::uint64_t trusted_version_ = 0;
  AuthTag trusted_mac_;
};

}  // namespace khe
