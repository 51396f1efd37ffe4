#include "pixemb/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "pixemb/kernels.hpp"

namespace pixemb {

std::string BenchReport::to_csv() const {
    std::string out = "method,mean_ms,std_ms,runs\n";
    char line[160];
    for (const auto& r : records) {
        std::snprintf(line, sizeof(line), "%s,%.4f,%.4f,%d\n", r.method.c_str(), r.mean_ms,
                      r.std_ms, r.runs);
        out += line;
    }
    return out;
}

BenchReport run_bench(const std::vector<BenchMethod>& methods, int repeats) {
    if (repeats < 1) {
        throw ValueError("bench: repeats must be positive");
    }
    std::vector<std::vector<double>> samples(methods.size());
    for (auto& s : samples) s.reserve(static_cast<std::size_t>(repeats));

    for (const auto& m : methods) m.run();  // warmup, not recorded

    using clock = std::chrono::steady_clock;
    for (int rep = 0; rep < repeats; ++rep) {
        for (std::size_t i = 0; i < methods.size(); ++i) {
            const auto t0 = clock::now();
            methods[i].run();
            const auto t1 = clock::now();
            samples[i].push_back(
                std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / 1e6);
        }
    }

    BenchReport report;
    report.threads = num_threads();
    report.machine = machine_description();
    for (std::size_t i = 0; i < methods.size(); ++i) {
        BenchRecord rec;
        rec.method = methods[i].name;
        rec.runs = repeats;
        double sum = 0.0;
        for (double v : samples[i]) sum += v;
        rec.mean_ms = sum / repeats;
        if (repeats > 1) {
            double sq = 0.0;
            for (double v : samples[i]) sq += (v - rec.mean_ms) * (v - rec.mean_ms);
            rec.std_ms = std::sqrt(sq / (repeats - 1));
        }
        report.records.push_back(std::move(rec));
    }
    return report;
}

std::string machine_description() {
    std::ifstream cpuinfo("/proc/cpuinfo");
    std::string line;
    std::string model = "unknown cpu";
    while (std::getline(cpuinfo, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                model = line.substr(colon + 2);
            }
            break;
        }
    }
    return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads";
}

}  // namespace pixemb
