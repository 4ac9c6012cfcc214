#pragma once

// Experiment driver over the streaming decoder: runs one example through the
// read/write policy with latency bookkeeping, sweeps checkpoint x step-size
// grids into latency-quality curves, serializes the curves (JSON for tooling,
// CSV for plotting), and pairs two curve sets into a quality-at-matched-latency
// comparison table.
//
// All latencies here are in raw source frames; any frames-to-milliseconds
// mapping is presentation-level and never enters these computations.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simul/latency.hpp"
#include "simul/model.hpp"
#include "simul/monotonic.hpp"
#include "simul/training.hpp"

namespace simul {

/// One saved model entered into a sweep. Checkpoints do not record the
/// latency weight they were trained with, so it travels alongside the path
/// and labels the resulting curve points.
struct CheckpointEntry {
  std::string path;
  double lambda = 0.0;
};

struct SweepConfig {
  std::vector<CheckpointEntry> checkpoints;
  std::vector<int> step_frames = {4, 8, 12, 16, 20, 24};
  // Re-encode the full received prefix on every READ instead of extending
  // encoder caches incrementally (both produce identical hypotheses).
  bool reencode_prefix = false;
  std::string out_dir = "runs/sweep";
  // Provenance stamped into the CurveSet: the seed and a hash of whatever
  // produced the test corpus (the sweep takes the corpus ready-made).
  std::uint64_t seed = 0;
  std::string spec_hash;

  /// Throws std::invalid_argument on empty lists, step sizes < 1,
  /// duplicate step sizes or checkpoint paths, or an empty output dir.
  void validate() const;
};

/// One latency-quality operating point of one model.
struct CurvePoint {
  std::string model;  // checkpoint file stem
  double lambda = 0.0;
  int step_frames = 0;
  double al = 0.0;   // corpus AL: mean per-sentence average lagging, raw frames
  double dal = 0.0;  // corpus DAL, same aggregation and units
  double bleu = 0.0;
  double token_accuracy = 0.0;
};

/// Curve points plus provenance. `timestamp` is informational: it appears in
/// the JSON only, never in the CSV, so repeated runs with the same inputs
/// produce byte-identical CSV tables.
struct CurveSet {
  std::vector<CurvePoint> points;
  std::uint64_t seed = 0;
  std::string spec_hash;
  std::string timestamp;  // ISO 8601 UTC, set when the sweep ran
};

/// One example pushed through the streaming policy, with latency bookkeeping.
/// `hypothesis` is exactly what simulate_decode emits; `delays` holds the raw
/// frames consumed before each token. A sentence whose output is empty has no
/// measurable lagging and reports al = dal = 0.
struct StreamRun {
  DecisionTrace trace;
  DelayVector delays;
  double al = 0.0;
  double dal = 0.0;
  const std::vector<int>& hypothesis() const { return trace.output; }
};

/// Policy for a sweep cell: threshold decisions, `step_frames` raw frames per
/// READ, incremental or re-encoding source handling.
PolicyConfig stream_policy(int step_frames, bool reencode_prefix = false);

StreamRun run_stream(const Model& m, const Tensor& source_frames, const PolicyConfig& cfg);

/// Evaluates every (checkpoint, step size) cell on the test corpus, in order
/// sorted by checkpoint path then step size, and writes curves.json and
/// curves.csv under cfg.out_dir. A checkpoint that fails to load raises
/// std::runtime_error naming it — after flushing the points already computed
/// to the same files.
CurveSet sweep(const SweepConfig& cfg, std::span<const PairedExample> test_set);

/// "model,lambda,step_frames,al,dal,bleu,token_accuracy"
std::string curves_csv_header();
/// Header plus one row per point; doubles in shortest round-trip form.
std::string curves_csv(const CurveSet& cs);

void write_curves(const CurveSet& cs, const std::string& json_path,
                  const std::string& csv_path);
/// Reads a file written by write_curves; round-trips points and metadata.
CurveSet read_curves(const std::string& json_path);
/// Reads the CSV table back; points round-trip exactly, metadata (which the
/// CSV deliberately omits) comes back empty.
CurveSet read_curves_csv(const std::string& csv_path);

struct ComparePair {
  CurvePoint baseline;
  CurvePoint treatment;
  double delta_bleu = 0.0;  // treatment - baseline
  double pct_gain = 0.0;    // 100 * delta / baseline BLEU (0 when baseline is 0)
};

struct CompareResult {
  std::vector<ComparePair> pairs;  // ascending treatment AL
  double mean_delta_bleu = 0.0;
  double mean_pct_gain = 0.0;
  int unpaired = 0;         // treatment points with no eligible counterpart
  bool comparable = false;  // false when no pair could be formed
};

/// Pairs each treatment point, in ascending AL order, with the nearest-AL
/// baseline point whose AL is >= the treatment's (quality gains are only
/// credited where the treatment is at least as fast). Each baseline point is
/// used at most once, so overlapping curves pair up assortatively; treatment
/// points with no eligible baseline left are counted, not paired. Reports
/// BLEU difference and percent gain per pair and their means.
/// Throws std::invalid_argument when both sets carry non-empty, differing
/// spec hashes (curves over different corpora are not comparable).
CompareResult compare(const CurveSet& baseline, const CurveSet& treatment);

/// Renders the pairs and their means as a fixed-width text table, or the
/// line "no comparable points" when pairing failed.
std::string format_compare(const CompareResult& r);

}  // namespace simul
