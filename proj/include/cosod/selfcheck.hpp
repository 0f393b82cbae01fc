#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cosod/losses.hpp"
#include "cosod/metrics.hpp"

namespace cosod {

struct SuiteResult {
  std::string name;
  bool pass = true;
  int cases = 0;
  int failures = 0;
  // First failing property with its counterexample, or a summary.
  std::string detail;
};

struct SelfCheckOptions {
  std::uint64_t seed = 0;
  int instances = 20;  // random instances per gradient-checked op
  // Deliberate faults, used to show the suites can fail.
  MaskDifference mask_op = MaskDifference::kXor;
  bool pe_in_tgl = false;
};

// Central differences for every tensor primitive, encoder block and loss.
SuiteResult gradient_suite(const SelfCheckOptions& opts);
// Group encoder outputs permute with their inputs; the consensus and the
// final maps do not depend on image order.
SuiteResult permutation_suite(const SelfCheckOptions& opts);
// With positional encodings inside the group encoder some reordering must
// change the output; passes when such a counterexample is found.
SuiteResult pe_counterexample_suite(const SelfCheckOptions& opts);
// Exhaustive 2x2 and 10^4 random 8x8 triples: set identities plus agreement
// with a pixelwise XOR oracle.
SuiteResult mask_suite(const SelfCheckOptions& opts);
SuiteResult loss_sanity_suite(const SelfCheckOptions& opts);
// Threshold sweeps against per-threshold brute force on 8x8 maps.
SuiteResult metric_oracle_suite(const SelfCheckOptions& opts);

std::vector<SuiteResult> run_selfcheck(const SelfCheckOptions& opts);

// Brute-force references used by the metric oracle.
std::array<PrPoint, kThresholds> brute_force_pr(const std::vector<Plane>& preds, const std::vector<Plane>& gts,
                                                double beta_sq = 0.3);
double brute_force_e_at(const Plane& pred, const Plane& gt, int threshold);

}  // namespace cosod
