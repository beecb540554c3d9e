#pragma once

#include <algorithm>
#include <cstddef>

namespace cadeblur {

/// Records tensor allocations made on the current thread while alive.
///
/// Used to verify that operators with a memory-footprint contract never
/// materialise buffers above a given element count. Audits nest; only the
/// innermost one is notified.
class AllocationAudit {
 public:
  AllocationAudit() : previous_(current()) { current() = this; }
  ~AllocationAudit() { current() = previous_; }

  AllocationAudit(const AllocationAudit&) = delete;
  AllocationAudit& operator=(const AllocationAudit&) = delete;

  std::size_t largest() const noexcept { return largest_; }
  std::size_t count() const noexcept { return count_; }
  std::size_t total() const noexcept { return total_; }

  /// Number of recorded allocations holding at least `elements` values.
  std::size_t count_at_least(std::size_t elements) const noexcept {
    return largest_ >= elements ? at_least_hits(elements) : 0;
  }

  static void note(std::size_t elements) noexcept {
    if (AllocationAudit* a = current()) a->record(elements);
  }

 private:
  static AllocationAudit*& current() noexcept {
    thread_local AllocationAudit* active = nullptr;
    return active;
  }

  void record(std::size_t elements) noexcept {
    largest_ = std::max(largest_, elements);
    total_ += elements;
    ++count_;
    for (std::size_t i = 0; i < kHistory; ++i) {
      if (history_[i] == 0) {
        history_[i] = elements;
        return;
      }
    }
    // History full: keep the largest entries.
    auto smallest = std::min_element(history_, history_ + kHistory);
    if (*smallest < elements) *smallest = elements;
  }

  std::size_t at_least_hits(std::size_t elements) const noexcept {
    return static_cast<std::size_t>(
        std::count_if(history_, history_ + kHistory, [&](std::size_t e) { return e >= elements; }));
  }

  static constexpr std::size_t kHistory = 64;
  AllocationAudit* previous_;
  std::size_t largest_ = 0;
  std::size_t count_ = 0;
  std::size_t total_ = 0;
  std::size_t history_[kHistory] = {};
};

}  // namespace cadeblur
