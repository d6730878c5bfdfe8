#pragma once

// Small persistent worker pool for data-parallel kernels. Work splits into
// one contiguous block per lane, so every output element is produced by
// exactly one thread with the same per-element arithmetic order as the
// serial loop: results are bitwise independent of scheduling.

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ftlab {

class WorkerPool {
public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    int lanes() const { return static_cast<int>(workers_.size()) + 1; }

    /// Runs fn(begin, end) over [0, n) split into one block per lane; the
    /// calling thread takes the first block. Serialized across callers.
    void for_blocks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
        if (n == 0) return;
        const std::size_t lane_count = static_cast<std::size_t>(lanes());
        if (lane_count == 1 || n < lane_count) {
            fn(0, n);
            return;
        }
        std::unique_lock<std::mutex> guard(submit_mutex_);
        const std::size_t chunk = (n + lane_count - 1) / lane_count;
        pending_.store(static_cast<int>(workers_.size()), std::memory_order_relaxed);
        {
            std::lock_guard<std::mutex> lock(task_mutex_);
            task_ = &fn;
            task_n_ = n;
            task_chunk_ = chunk;
            ++generation_;
        }
        task_cv_.notify_all();
        fn(0, std::min(chunk, n));
        std::unique_lock<std::mutex> lock(task_mutex_);
        done_cv_.wait(lock, [this] { return pending_.load(std::memory_order_acquire) == 0; });
        task_ = nullptr;
    }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

private:
    WorkerPool() {
        int lanes_wanted = static_cast<int>(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("FTLAB_THREADS")) {
            const int parsed = std::atoi(env);
            if (parsed >= 1) lanes_wanted = parsed;
        }
        if (lanes_wanted < 1) lanes_wanted = 1;
        if (lanes_wanted > 8) lanes_wanted = 8;
        for (int lane = 1; lane < lanes_wanted; ++lane) {
            workers_.emplace_back([this, lane] { worker_loop(static_cast<std::size_t>(lane)); });
        }
    }

    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lock(task_mutex_);
            stopping_ = true;
            ++generation_;
        }
        task_cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void worker_loop(std::size_t lane) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* task = nullptr;
            std::size_t n = 0, chunk = 0;
            {
                std::unique_lock<std::mutex> lock(task_mutex_);
                task_cv_.wait(lock, [&] { return generation_ != seen; });
                seen = generation_;
                if (stopping_) return;
                task = task_;
                n = task_n_;
                chunk = task_chunk_;
            }
            if (task) {
                const std::size_t begin = std::min(lane * chunk, n);
                const std::size_t end = std::min(begin + chunk, n);
                if (begin < end) (*task)(begin, end);
            }
            if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
                std::lock_guard<std::mutex> lock(task_mutex_);
                done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex submit_mutex_;
    std::mutex task_mutex_;
    std::condition_variable task_cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t, std::size_t)>* task_ = nullptr;
    std::size_t task_n_ = 0;
    std::size_t task_chunk_ = 0;
    std::uint64_t generation_ = 0;
    std::atomic<int> pending_{0};
    bool stopping_ = false;
};

}  // namespace ftlab
