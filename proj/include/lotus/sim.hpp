#pragma once

#include <cassert>
#include <coroutine>
#include <cstdint>
#include <deque>
#include <exception>
#include <optional>
#include <queue>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lotus/bytes.hpp"

namespace lotus {

// Simulated time in nanoseconds.
using SimTime = std::uint64_t;

constexpr SimTime sim_us(u64 n) { return n * 1000ull; }
constexpr SimTime sim_ms(u64 n) { return n * 1000'000ull; }

// Deterministic discrete-event scheduler. Single-threaded: all simulated
// concurrency is cooperative, interleaving only at await points. Events at
// equal timestamps fire in posting order.
class Scheduler {
 public:
  SimTime now() const { return now_; }

  void post_at(SimTime at, std::coroutine_handle<> h) {
    if (at < now_) at = now_;
    q_.push(Event{at, seq_++, h});
  }

  // Runs until the event queue is empty.
  void run() {
    while (!q_.empty()) {
      Event ev = q_.top();
      q_.pop();
      now_ = ev.at;
      if (++fired_ > event_cap_) throw std::runtime_error("sim: event cap exceeded (runaway?)");
      ev.h.resume();
    }
  }

  bool idle() const { return q_.empty(); }
  u64 events_fired() const { return fired_; }
  void set_event_cap(u64 cap) { event_cap_ = cap; }

 private:
  struct Event {
    SimTime at;
    u64 seq;
    std::coroutine_handle<> h;
    bool operator>(const Event& o) const {
      return at != o.at ? at > o.at : seq > o.seq;
    }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> q_;
  SimTime now_ = 0;
  u64 seq_ = 0;
  u64 fired_ = 0;
  u64 event_cap_ = 2'000'000'000ull;
};

// Eagerly-started coroutine task. The body runs at construction until its
// first suspension; awaiting joins it. Detached tasks clean themselves up
// and swallow exceptions (fire-and-forget RPC responses, abandoned procs).
template <typename T>
class [[nodiscard]] Task {
 public:
  struct promise_type;
  using Handle = std::coroutine_handle<promise_type>;

  struct FinalAwaiter {
    bool await_ready() noexcept { return false; }
    std::coroutine_handle<> await_suspend(Handle h) noexcept {
      auto& p = h.promise();
      p.done = true;
      if (p.continuation) return p.continuation;
      if (p.detached) h.destroy();
      return std::noop_coroutine();
    }
    void await_resume() noexcept {}
  };

  struct promise_type {
    std::optional<T> value;
    std::exception_ptr error;
    std::coroutine_handle<> continuation;
    bool detached = false;
    bool done = false;

    Task get_return_object() { return Task{Handle::from_promise(*this)}; }
    std::suspend_never initial_suspend() noexcept { return {}; }
    FinalAwaiter final_suspend() noexcept { return {}; }
    void return_value(T v) { value.emplace(std::move(v)); }
    void unhandled_exception() { error = std::current_exception(); }
  };

  Task() = default;
  explicit Task(Handle h) : h_(h) {}
  Task(Task&& o) noexcept : h_(std::exchange(o.h_, {})) {}
  Task& operator=(Task&& o) noexcept {
    reset();
    h_ = std::exchange(o.h_, {});
    return *this;
  }
  Task(const Task&) = delete;
  Task& operator=(const Task&) = delete;
  ~Task() { reset(); }

  bool done() const { return h_ && h_.promise().done; }

  // Abandon: the task keeps running and destroys itself at completion.
  void detach() {
    if (!h_) return;
    if (h_.promise().done) {
      h_.destroy();
    } else {
      h_.promise().detached = true;
    }
    h_ = {};
  }

  auto operator co_await() {
    struct Awaiter {
      Handle h;
      bool await_ready() const noexcept { return h.promise().done; }
      std::coroutine_handle<> await_suspend(std::coroutine_handle<> cont) noexcept {
        h.promise().continuation = cont;
        return std::noop_coroutine();  // body already running elsewhere
      }
      T await_resume() {
        auto& p = h.promise();
        if (p.error) std::rethrow_exception(p.error);
        return std::move(*p.value);
      }
    };
    assert(h_);
    return Awaiter{h_};
  }

 private:
  void reset() {
    if (h_) detach();
  }
  Handle h_{};
};

template <>
class [[nodiscard]] Task<void> {
 public:
  struct promise_type;
  using Handle = std::coroutine_handle<promise_type>;

  struct FinalAwaiter {
    bool await_ready() noexcept { return false; }
    std::coroutine_handle<> await_suspend(Handle h) noexcept {
      auto& p = h.promise();
      p.done = true;
      if (p.continuation) return p.continuation;
      if (p.detached) h.destroy();
      return std::noop_coroutine();
    }
    void await_resume() noexcept {}
  };

  struct promise_type {
    std::exception_ptr error;
    std::coroutine_handle<> continuation;
    bool detached = false;
    bool done = false;

    Task get_return_object() { return Task{Handle::from_promise(*this)}; }
    std::suspend_never initial_suspend() noexcept { return {}; }
    FinalAwaiter final_suspend() noexcept { return {}; }
    void return_void() {}
    void unhandled_exception() { error = std::current_exception(); }
  };

  Task() = default;
  explicit Task(Handle h) : h_(h) {}
  Task(Task&& o) noexcept : h_(std::exchange(o.h_, {})) {}
  Task& operator=(Task&& o) noexcept {
    reset();
    h_ = std::exchange(o.h_, {});
    return *this;
  }
  Task(const Task&) = delete;
  Task& operator=(const Task&) = delete;
  ~Task() { reset(); }

  bool done() const { return h_ && h_.promise().done; }

  void detach() {
    if (!h_) return;
    if (h_.promise().done) {
      h_.destroy();
    } else {
      h_.promise().detached = true;
    }
    h_ = {};
  }

  auto operator co_await() {
    struct Awaiter {
      Handle h;
      bool await_ready() const noexcept { return h.promise().done; }
      std::coroutine_handle<> await_suspend(std::coroutine_handle<> cont) noexcept {
        h.promise().continuation = cont;
        return std::noop_coroutine();
      }
      void await_resume() {
        auto& p = h.promise();
        if (p.error) std::rethrow_exception(p.error);
      }
    };
    assert(h_);
    return Awaiter{h_};
  }

 private:
  void reset() {
    if (h_) detach();
  }
  Handle h_{};
};

// Launch a background process; it owns itself until completion.
inline void spawn(Task<void> t) { t.detach(); }

struct TimerAwaiter {
  Scheduler& sched;
  SimTime at;
  bool await_ready() const noexcept { return false; }
  void await_suspend(std::coroutine_handle<> h) { sched.post_at(at, h); }
  void await_resume() const noexcept {}
};

inline TimerAwaiter resume_at(Scheduler& s, SimTime t) { return {s, t}; }
inline TimerAwaiter delay(Scheduler& s, SimTime d) { return {s, s.now() + d}; }

// FIFO wait queue: coroutine condition variable.
class WaitQueue {
 public:
  explicit WaitQueue(Scheduler& s) : sched_(s) {}

  auto wait() {
    struct Awaiter {
      WaitQueue& wq;
      bool await_ready() const noexcept { return false; }
      void await_suspend(std::coroutine_handle<> h) { wq.waiters_.push_back(h); }
      void await_resume() const noexcept {}
    };
    return Awaiter{*this};
  }

  void notify_one() {
    if (waiters_.empty()) return;
    sched_.post_at(sched_.now(), waiters_.front());
    waiters_.pop_front();
  }

  void notify_all() {
    while (!waiters_.empty()) notify_one();
  }

  size_t waiting() const { return waiters_.size(); }

 private:
  Scheduler& sched_;
  std::deque<std::coroutine_handle<>> waiters_;
};

// Single-producer single-consumer completion slot.
template <typename T>
class OneShot {
 public:
  explicit OneShot(Scheduler& s) : sched_(&s) {}

  void set(T v) {
    value_.emplace(std::move(v));
    if (waiter_) {
      sched_->post_at(sched_->now(), waiter_);
      waiter_ = {};
    }
  }

  bool ready() const { return value_.has_value(); }

  auto take() {
    struct Awaiter {
      OneShot& slot;
      bool await_ready() const noexcept { return slot.value_.has_value(); }
      void await_suspend(std::coroutine_handle<> h) { slot.waiter_ = h; }
      T await_resume() { return std::move(*slot.value_); }
    };
    return Awaiter{*this};
  }

 private:
  Scheduler* sched_;
  std::optional<T> value_;
  std::coroutine_handle<> waiter_{};
};

}  // namespace lotus
