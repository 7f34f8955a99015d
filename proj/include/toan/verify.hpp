#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "toan/model.hpp"

namespace toan {

// Outcome of one oracle suite. `worst` is the largest observed error in the
// suite's own metric, compared against `tolerance`.
struct SuiteResult {
  std::string name;
  bool passed = false;
  int cases = 0;
  double worst = 0;
  double tolerance = 0;
  std::string detail;
};

// Central finite differences against backward() over every parameter entry
// of a full forward pass, always in 64-bit. Metric: |g - fd| / max(|g|, |fd|, floor).
struct GradCheckOptions {
  ModelConfig model;  // defaults below: 16 px input, c = c' = 8, N = 2, M = 16
  int way = 2;
  int shot = 1;
  int queries = 1;
  double step = 1e-5;
  double floor = 1e-7;
  double tolerance = 1e-4;
  std::uint64_t seed = 11;

  GradCheckOptions();
};

SuiteResult verify_gradcheck(const GradCheckOptions& options = {});

// Low-rank Hadamard form against explicit x^T (U V^T) y, one random shape per
// instance. Metric: |lowrank - full| / max(1, |full|).
SuiteResult verify_lowrank(bool f64, int instances = 1000, std::uint64_t seed = 21);

// Row sums and signs of TOMM attention, plus exact support recovery at hw = 1.
SuiteResult verify_softmax(bool f64, int instances = 1000, std::uint64_t seed = 31);

// Planted spatial permutation with logit gap 50 between the matching and
// every other position; aligned columns must equal permuted support columns.
SuiteResult verify_permutation(bool f64, int permutations = 100,
                               const std::vector<std::size_t>& positions = {4, 9, 361},
                               std::uint64_t seed = 41);

// Logit multiply-adds counted in align() at h x w and at 2h x 2w.
struct ComplexityMeasurement {
  std::size_t base_positions = 0;
  std::uint64_t base_macs = 0;
  std::uint64_t doubled_macs = 0;
  double base_ms = 0;
  double doubled_ms = 0;
  double ratio() const { return static_cast<double>(doubled_macs) / static_cast<double>(base_macs); }
};

ComplexityMeasurement measure_align_cost(std::size_t h, std::size_t w, std::size_t channels,
                                         std::size_t head_channels);

SuiteResult verify_complexity(std::size_t h = 19, std::size_t w = 19);

std::vector<std::string> verify_suite_names();

// Runs the named suites ("all" expands to every suite).
std::vector<SuiteResult> run_verify(const std::vector<std::string>& suites, bool f64);

}  // namespace toan
