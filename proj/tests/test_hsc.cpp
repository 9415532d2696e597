#include <gtest/gtest.h>

#include <map>
#include <random>

#include "khe/hsc.hpp"
#include "support/test_util.hpp"

using namespace khe;
using khe::testing::error_of;
using khe::testing::random_fixed;

namespace {

Nonce96 iv_in_set(std::uint8_t set, std::uint64_t tag) {
  return recombine_iv(IvSplit{set, CacheTag{tag, 0}});
}

AeadKey test_storage_key() {
  AeadKey k;
  for (std::size_t i = 0; i < k.size(); ++i) k.bytes[i] = static_cast<std::uint8_t>(0xa0 + i);
  return k;
}

}  // namespace

TEST(Hsc, Geometry) {
  static_assert(kHscSets == 64 && kHscWays == 2);
  static_assert(kHscTagBits == 90);
  static_assert(kHscEntryBits == 162);
  HandleStateCache cache;
  EXPECT_EQ(cache.validity().size(), 128u);
  EXPECT_EQ(CacheTag::kHighMask, (1u << 26) - 1);  // 64 + 26 = 90 tag bits
}

TEST(Hsc, InsertIntoEmptyCache) {
  HandleStateCache cache;
  Nonce96 iv = iv_in_set(17, 5);
  HscSlot slot = cache.insert(iv, 0, 0);
  EXPECT_EQ(slot, (HscSlot{17, 0}));
  EXPECT_EQ(slot.validity_bit(), 34u);
  EXPECT_TRUE(cache.validity()[34]);
  EXPECT_EQ(cache.valid_count(), 1u);

  auto hit = cache.lookup(iv);
  ASSERT_TRUE(hit);
  EXPECT_TRUE(hit->valid);
  EXPECT_EQ(hit->entry.cache_tag, split_iv(iv).tag);
  EXPECT_FALSE(cache.lookup(iv_in_set(17, 6)));
  EXPECT_FALSE(cache.lookup(iv_in_set(18, 5)));
}

TEST(Hsc, SetFullWithoutSwap) {
  HandleStateCache cache;
  cache.insert(iv_in_set(3, 1), 0, 0);
  EXPECT_EQ(cache.insert(iv_in_set(3, 2), 0, 0), (HscSlot{3, 1}));
  EXPECT_EQ(error_of([&] { cache.insert(iv_in_set(3, 3), 0, 0); }), ErrorCode::SetFull);
  // Other sets are unaffected.
  EXPECT_FALSE(error_of([&] { cache.insert(iv_in_set(4, 3), 0, 0); }));
}

TEST(Hsc, DuplicateTagRejected) {
  HandleStateCache cache;
  cache.insert(iv_in_set(9, 1), 0, 0);
  EXPECT_EQ(error_of([&] { cache.insert(iv_in_set(9, 1), 0, 0); }), ErrorCode::DuplicateTag);
}

TEST(Hsc, InvalidateKeepsTagAndFreesWay) {
  HandleStateCache cache;
  Nonce96 a = iv_in_set(5, 1), b = iv_in_set(5, 2), c = iv_in_set(5, 3);
  cache.insert(a, 0, 0);
  cache.insert(b, 0, 0);
  cache.invalidate(a);
  auto hit = cache.lookup(a);
  ASSERT_TRUE(hit);
  EXPECT_FALSE(hit->valid);
  EXPECT_FALSE(cache.validity()[10]);

  EXPECT_EQ(cache.insert(c, 0, 0), (HscSlot{5, 0}));  // reuses the revoked way
  EXPECT_FALSE(cache.lookup(a));
  EXPECT_EQ(error_of([&] { cache.invalidate(iv_in_set(6, 1)); }), ErrorCode::Miss);
}

TEST(Hsc, Decrement) {
  HandleStateCache cache;
  Nonce96 iv = iv_in_set(1, 1);
  cache.insert(iv, 0, 2);
  EXPECT_EQ(cache.decrement(iv), 1);
  EXPECT_TRUE(cache.lookup(iv)->valid);
  EXPECT_EQ(cache.decrement(iv), 0);
  EXPECT_FALSE(cache.lookup(iv)->valid);
  EXPECT_EQ(error_of([&] { cache.decrement(iv); }), ErrorCode::Exhausted);

  Nonce96 zero = iv_in_set(2, 1);
  cache.insert(zero, 0, 0);
  EXPECT_EQ(error_of([&] { cache.decrement(zero); }), ErrorCode::Exhausted);
  EXPECT_EQ(error_of([&] { cache.decrement(iv_in_set(3, 3)); }), ErrorCode::Miss);
}

TEST(Hsc, RevokeByBinding) {
  HandleStateCache cache;
  cache.insert(iv_in_set(0, 1), 7, 0, BindingKind::Process);
  cache.insert(iv_in_set(1, 1), 7, 0, BindingKind::Process);
  cache.insert(iv_in_set(2, 1), 7, 0, BindingKind::Pmp);
  cache.insert(iv_in_set(3, 1), 8, 0, BindingKind::Process);
  cache.insert(iv_in_set(4, 1), 0, 0, BindingKind::None);

  EXPECT_EQ(cache.revoke_by_binding(0, false), 0u);  // unbound entries are not id 0 bindings
  EXPECT_EQ(cache.revoke_by_binding(7, false), 2u);
  EXPECT_FALSE(cache.lookup(iv_in_set(0, 1))->valid);
  EXPECT_FALSE(cache.lookup(iv_in_set(1, 1))->valid);
  EXPECT_TRUE(cache.lookup(iv_in_set(2, 1))->valid);
  EXPECT_TRUE(cache.lookup(iv_in_set(3, 1))->valid);
  EXPECT_EQ(cache.revoke_by_binding(7, false), 0u);
  EXPECT_EQ(cache.revoke_by_binding(7, true), 1u);
  EXPECT_EQ(cache.valid_count(), 2u);
}

TEST(Hsc, SwapEvictsLeastRecentlyUsed) {
  HandleStateCache cache(test_storage_key());
  Nonce96 a = iv_in_set(12, 1), b = iv_in_set(12, 2), c = iv_in_set(12, 3);
  cache.insert(a, 11, 4, BindingKind::Process);
  cache.insert(b, 22, 0);
  cache.lookup(a);  // b is now LRU
  HscSlot slot = cache.insert(c, 33, 0);
  EXPECT_EQ(slot, (HscSlot{12, 1}));
  ASSERT_EQ(cache.region().records.size(), 1u);
  EXPECT_EQ(cache.region().records[0].cache_tag, split_iv(b).tag);

  // A miss on b swaps it back in, evicting the now-LRU a.
  auto hit = cache.lookup(b);
  ASSERT_TRUE(hit);
  EXPECT_TRUE(hit->valid);
  EXPECT_EQ(hit->entry.binding_id, 22u);
  ASSERT_EQ(cache.region().records.size(), 1u);
  EXPECT_EQ(cache.region().records[0].cache_tag, split_iv(a).tag);

  auto back = cache.lookup(a);
  ASSERT_TRUE(back);
  EXPECT_EQ(back->entry.binding_id, 11u);
  EXPECT_EQ(back->entry.counter, 4);
  EXPECT_EQ(back->binding, BindingKind::Process);
}

TEST(Hsc, SwapRoundTrip) {
  HandleStateCache cache(test_storage_key());
  Nonce96 iv = iv_in_set(40, 77);
  HscSlot slot = cache.insert(iv, 0xdeadbeef, 200, BindingKind::Pmp);
  HscEntry before = *cache.entry_at(slot);
  cache.swap_out(slot.set, slot.way);
  EXPECT_FALSE(cache.entry_at(slot));
  EXPECT_FALSE(cache.validity()[slot.validity_bit()]);
  auto version = cache.region().version;

  EXPECT_TRUE(cache.swap_in(iv));
  EXPECT_GT(cache.region().version, version);
  auto hit = cache.lookup(iv);
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->entry, before);
  EXPECT_EQ(hit->binding, BindingKind::Pmp);
  EXPECT_TRUE(hit->valid);
  EXPECT_FALSE(cache.swap_in(iv_in_set(40, 78)));
}

TEST(Hsc, SwapRequiresStorageKey) {
  HandleStateCache cache;
  cache.insert(iv_in_set(1, 1), 0, 0);
  EXPECT_EQ(error_of([&] { cache.swap_out(1, 0); }), ErrorCode::SwapDisabled);
}

TEST(Hsc, RollbackOfRegionDetected) {
  HandleStateCache cache(test_storage_key());
  Nonce96 a = iv_in_set(8, 1), b = iv_in_set(8, 2), c = iv_in_set(8, 3), d = iv_in_set(8, 4);
  cache.insert(a, 0, 5);
  cache.insert(b, 0, 5);
  cache.insert(c, 0, 5);  // evicts a
  SwapRegion snapshot = cache.region();
  cache.insert(d, 0, 5);  // evicts b
  cache.region() = snapshot;
  EXPECT_EQ(error_of([&] { cache.lookup(b); }), ErrorCode::RollbackDetected);
}

TEST(Hsc, TamperedRecordDetected) {
  HandleStateCache cache(test_storage_key());
  Nonce96 a = iv_in_set(8, 1);
  cache.insert(a, 0, 5);
  cache.insert(iv_in_set(8, 2), 0, 5);
  cache.insert(iv_in_set(8, 3), 0, 5);
  Bytes image = encode_region(cache.region());
  for (std::size_t i = 0; i < image.size(); ++i) {
    Bytes t = image;
    t[i] ^= 0x01;
    try {
      cache.region() = decode_region(t);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BadLength);  // count byte changed
      continue;
    }
    EXPECT_EQ(error_of([&] { cache.lookup(a); }), ErrorCode::RollbackDetected) << "byte " << i;
  }
  cache.region() = decode_region(image);
  EXPECT_TRUE(cache.lookup(a));
}

TEST(Hsc, RevokeByBindingReachesSwapRegion) {
  HandleStateCache cache(test_storage_key());
  Nonce96 a = iv_in_set(20, 1);
  cache.insert(a, 9, 0, BindingKind::Process);
  cache.insert(iv_in_set(20, 2), 9, 0, BindingKind::Process);
  cache.insert(iv_in_set(20, 3), 1, 0, BindingKind::Process);  // evicts a
  ASSERT_EQ(cache.region().records.size(), 1u);
  EXPECT_EQ(cache.revoke_by_binding(9, false), 2u);
  EXPECT_EQ(cache.region().records.size(), 1u);  // kept, marked invalid
  auto hit = cache.lookup(a);
  ASSERT_TRUE(hit);
  EXPECT_FALSE(hit->valid);
}

TEST(Hsc, RegionEncodingRoundTrip) {
  HandleStateCache cache(test_storage_key());
  for (std::uint64_t t = 1; t <= 5; ++t) cache.insert(iv_in_set(30, t), t, 1);
  Bytes image = encode_region(cache.region());
  EXPECT_EQ(image.size(), 4 + 3 * SwapRecord::kEncodedSize + 8 + 16);
  EXPECT_EQ(decode_region(image), cache.region());
  EXPECT_EQ(error_of([&] { decode_region(ByteView(image).subspan(1)); }), ErrorCode::BadLength);
}

TEST(Hsc, SerializationRoundTrip) {
  HandleStateCache cache(test_storage_key());
  std::mt19937_64 rng(8);
  for (int i = 0; i < 300; ++i)
    cache.insert(random_fixed<Nonce96>(rng), rng(), static_cast<std::uint8_t>(rng()),
                 static_cast<BindingKind>(rng() % 3));
  Bytes state = cache.serialize();
  EXPECT_EQ(state.size(), HandleStateCache::kSerializedSize);

  HandleStateCache restored(test_storage_key());
  restored.deserialize(state);
  restored.region() = cache.region();
  EXPECT_EQ(restored.serialize(), state);
  EXPECT_EQ(restored.validity(), cache.validity());
}

// Model check: with swapping on, every inserted and not-revoked entry stays
// usable with exactly its counter, whatever the eviction order.
TEST(Hsc, SwapPreservesUsableSetProperty) {
  std::mt19937_64 rng(12);
  for (int round = 0; round < 20; ++round) {
    HandleStateCache cache(test_storage_key());
    struct Model { std::uint64_t binding; std::uint8_t counter; bool valid; };
    std::map<std::uint64_t, Model> model;  // keyed by tag; all in a handful of sets
    std::uint64_t next_tag = 1;
    auto iv_of = [](std::uint64_t tag) { return iv_in_set(static_cast<std::uint8_t>(tag % 3), tag); };

    for (int step = 0; step < 200; ++step) {
      int op = static_cast<int>(rng() % 4);
      if (op == 0 || model.empty()) {
        std::uint64_t tag = next_tag++;
        std::uint8_t counter = static_cast<std::uint8_t>(1 + rng() % 5);
        cache.insert(iv_of(tag), tag * 3, counter, BindingKind::Process);
        model[tag] = {tag * 3, counter, true};
        continue;
      }
      auto it = model.begin();
      std::advance(it, static_cast<long>(rng() % model.size()));
      Nonce96 iv = iv_of(it->first);
      if (op == 1) {
        auto hit = cache.lookup(iv);
        if (!it->second.valid) continue;  // revoked entries may have been overwritten
        ASSERT_TRUE(hit);
        ASSERT_TRUE(hit->valid);
        ASSERT_EQ(hit->entry.binding_id, it->second.binding);
        ASSERT_EQ(hit->entry.counter, it->second.counter);
      } else if (op == 2 && it->second.valid) {
        ASSERT_EQ(cache.decrement(iv), it->second.counter - 1);
        if (--it->second.counter == 0) it->second.valid = false;
      } else if (op == 3 && it->second.valid) {
        cache.invalidate(iv);
        it->second.valid = false;
      }
    }
    for (auto& [tag, m] : model) {
      auto hit = cache.lookup(iv_of(tag));
      if (m.valid) {
        ASSERT_TRUE(hit && hit->valid);
        ASSERT_EQ(hit->entry.counter, m.counter);
      } else {
        ASSERT_TRUE(!hit || !hit->valid);
      }
    }
  }
}
