#pragma once

// Byte accounting for tensor payloads. Every payload buffer owned by a tensor is
// allocated through TrackedAllocator, so live_bytes() is the sum of all live
// payloads and peak_bytes() its high-water mark since the last reset.

#include <cstddef>
#include <cstdint>
#include <new>
#include <vector>

#include "latchkit/config.hpp"

LATCHKIT_BEGIN_NAMESPACE
namespace arena {

int64_t live_bytes();
int64_t peak_bytes();
// Sets the high-water mark to the current live total.
void reset_peak();

void on_allocate(std::size_t bytes);
void on_release(std::size_t bytes);

template <class T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    on_allocate(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    on_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace arena

using Buffer = std::vector<real, arena::TrackedAllocator<real>>;
LATCHKIT_END_NAMESPACE
