#include "pixemb/common.hpp"

#include <cmath>
#include <iostream>
#include <mutex>
#include <thread>

namespace pixemb {

namespace {
std::mutex g_warn_mutex;
WarnHandler g_warn_handler;
}  // namespace

void set_warn_handler(WarnHandler handler) {
    std::lock_guard<std::mutex> lock(g_warn_mutex);
    g_warn_handler = std::move(handler);
}

void warn(std::string_view message) {
    WarnHandler handler;
    {
        std::lock_guard<std::mutex> lock(g_warn_mutex);
        handler = g_warn_handler;
    }
    if (handler) {
        handler(message);
    } else {
        std::cerr << "[pixemb] warning: " << message << "\n";
    }
}

float Rng::normal(float mean, float stddev) {
    if (have_spare_) {
        have_spare_ = false;
        return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform01();
    } while (u1 <= 1e-12);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(theta));
    have_spare_ = true;
    return mean + stddev * static_cast<float>(r * std::cos(theta));
}

void parallel_for(std::int64_t total, int threads,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (total <= 0) return;
    if (threads < 1) threads = 1;
    const auto workers = static_cast<std::int64_t>(threads) < total
                             ? static_cast<std::int64_t>(threads)
                             : total;
    if (workers == 1) {
        body(0, total);
        return;
    }
    const std::int64_t chunk = (total + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (std::int64_t w = 0; w < workers; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min(total, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    out += ")";
    return out;
}

}  // namespace pixemb
