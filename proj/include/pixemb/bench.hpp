#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pixemb/common.hpp"

namespace pixemb {

struct BenchRecord {
    std::string method;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    int runs = 0;
};

struct BenchReport {
    std::vector<BenchRecord> records;
    int threads = 1;
    std::string machine;

    std::string to_csv() const;  // method,mean_ms,std_ms,runs
};

struct BenchMethod {
    std::string name;
    std::function<void()> run;
};

// Times each method `repeats` times, alternating between methods round-robin
// each repetition. One warmup round is not recorded. Standard deviation is
// the sample deviation over the recorded runs (0 when repeats == 1).
BenchReport run_bench(const std::vector<BenchMethod>& methods, int repeats);

std::string machine_description();

}  // namespace pixemb
