#include "simul/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <utility>

#include <json.hpp>

namespace simul {

namespace {

namespace fs = std::filesystem;

std::string iso_utc_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[80];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

// Shortest round-trip decimal form, the same convention the JSON emitter uses,
// so the CSV and JSON agree and both parse back to the identical double.
std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  if (res.ec != std::errc())
    throw std::runtime_error("fmt_double: conversion failed");
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error(std::string("read_curves_csv: bad ") + what + " '" + s + "'");
  return v;
}

int parse_int(const std::string& s, const char* what) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error(std::string("read_curves_csv: bad ") + what + " '" + s + "'");
  return v;
}

void check_point_finite(const CurvePoint& p) {
  if (!(std::isfinite(p.lambda) && std::isfinite(p.al) && std::isfinite(p.dal) &&
        std::isfinite(p.bleu) && std::isfinite(p.token_accuracy)))
    throw std::runtime_error("sweep: non-finite metric for model '" + p.model +
                             "' at step_frames " + std::to_string(p.step_frames));
}

}  // namespace

void SweepConfig::validate() const {
  if (checkpoints.empty()) throw std::invalid_argument("SweepConfig: no checkpoints");
  if (step_frames.empty()) throw std::invalid_argument("SweepConfig: no step sizes");
  if (out_dir.empty()) throw std::invalid_argument("SweepConfig: empty output dir");
  for (int s : step_frames)
    if (s < 1) throw std::invalid_argument("SweepConfig: step_frames must be >= 1");
  std::vector<int> steps = step_frames;
  std::sort(steps.begin(), steps.end());
  if (std::adjacent_find(steps.begin(), steps.end()) != steps.end())
    throw std::invalid_argument("SweepConfig: duplicate step size");
  std::vector<std::string> paths;
  paths.reserve(checkpoints.size());
  for (const CheckpointEntry& c : checkpoints) {
    if (c.path.empty()) throw std::invalid_argument("SweepConfig: empty checkpoint path");
    if (!std::isfinite(c.lambda))
      throw std::invalid_argument("SweepConfig: non-finite lambda for " + c.path);
    paths.push_back(c.path);
  }
  std::sort(paths.begin(), paths.end());
  if (std::adjacent_find(paths.begin(), paths.end()) != paths.end())
    throw std::invalid_argument("SweepConfig: duplicate checkpoint path");
}

PolicyConfig stream_policy(int step_frames, bool reencode_prefix) {
  if (step_frames < 1) throw std::invalid_argument("stream_policy: step_frames must be >= 1");
  PolicyConfig cfg;
  cfg.step_frames = step_frames;
  cfg.reencode_prefix = reencode_prefix;
  return cfg;
}

StreamRun run_stream(const Model& m, const Tensor& source_frames, const PolicyConfig& cfg) {
  StreamRun r;
  r.trace = simulate_decode(m, source_frames, cfg);
  r.delays.src_len = static_cast<double>(source_frames.rows());
  r.delays.d.assign(r.trace.delays.begin(), r.trace.delays.end());
  if (!r.delays.d.empty()) {
    r.al = average_lagging(r.delays);
    r.dal = dal_metric(r.delays);
  }
  return r;
}

CurveSet sweep(const SweepConfig& cfg, std::span<const PairedExample> test_set) {
  cfg.validate();
  if (test_set.empty()) throw std::invalid_argument("sweep: empty test set");

  std::vector<CheckpointEntry> entries = cfg.checkpoints;
  std::sort(entries.begin(), entries.end(),
            [](const CheckpointEntry& a, const CheckpointEntry& b) { return a.path < b.path; });
  std::vector<int> steps = cfg.step_frames;
  std::sort(steps.begin(), steps.end());

  CurveSet cs;
  cs.seed = cfg.seed;
  cs.spec_hash = cfg.spec_hash;
  cs.timestamp = iso_utc_now();

  fs::create_directories(cfg.out_dir);
  const std::string json_path = (fs::path(cfg.out_dir) / "curves.json").string();
  const std::string csv_path = (fs::path(cfg.out_dir) / "curves.csv").string();

  for (const CheckpointEntry& entry : entries) {
    std::optional<Model> model;
    try {
      model.emplace(load_model(entry.path));
    } catch (const std::exception& e) {
      write_curves(cs, json_path, csv_path);
      throw std::runtime_error("sweep: checkpoint '" + entry.path + "' could not be loaded (" +
                               e.what() + "); partial results flushed to " + cfg.out_dir);
    }
    const std::string label = fs::path(entry.path).stem().string();

    for (int sf : steps) {
      const PolicyConfig policy = stream_policy(sf, cfg.reencode_prefix);
      std::vector<std::vector<int>> refs, hyps;
      refs.reserve(test_set.size());
      hyps.reserve(test_set.size());
      double al_sum = 0.0, dal_sum = 0.0;
      int scored = 0;
      for (const PairedExample& ex : test_set) {
        const StreamRun run = run_stream(*model, ex.frames, policy);
        refs.push_back(ex.target);
        hyps.push_back(run.hypothesis());
        if (!run.delays.d.empty()) {
          al_sum += run.al;
          dal_sum += run.dal;
          ++scored;
        }
      }
      CurvePoint pt;
      pt.model = label;
      pt.lambda = entry.lambda;
      pt.step_frames = sf;
      pt.al = scored > 0 ? al_sum / scored : 0.0;
      pt.dal = scored > 0 ? dal_sum / scored : 0.0;
      pt.bleu = corpus_bleu(refs, hyps);
      pt.token_accuracy = token_accuracy(refs, hyps);
      check_point_finite(pt);
      cs.points.push_back(std::move(pt));
    }
  }

  write_curves(cs, json_path, csv_path);
  return cs;
}

std::string curves_csv_header() { return "model,lambda,step_frames,al,dal,bleu,token_accuracy"; }

std::string curves_csv(const CurveSet& cs) {
  std::string out = curves_csv_header() + "\n";
  for (const CurvePoint& p : cs.points) {
    if (p.model.find(',') != std::string::npos || p.model.find('\n') != std::string::npos)
      throw std::invalid_argument("curves_csv: model label '" + p.model +
                                  "' contains a delimiter");
    out += p.model;
    out += ',';
    out += fmt_double(p.lambda);
    out += ',';
    out += std::to_string(p.step_frames);
    out += ',';
    out += fmt_double(p.al);
    out += ',';
    out += fmt_double(p.dal);
    out += ',';
    out += fmt_double(p.bleu);
    out += ',';
    out += fmt_double(p.token_accuracy);
    out += '\n';
  }
  return out;
}

void write_curves(const CurveSet& cs, const std::string& json_path, const std::string& csv_path) {
  nlohmann::json j;
  j["metadata"] = {{"seed", cs.seed}, {"spec_hash", cs.spec_hash}, {"timestamp", cs.timestamp}};
  nlohmann::json pts = nlohmann::json::array();
  for (const CurvePoint& p : cs.points) {
    pts.push_back({{"model", p.model},
                   {"lambda", p.lambda},
                   {"step_frames", p.step_frames},
                   {"al", p.al},
                   {"dal", p.dal},
                   {"bleu", p.bleu},
                   {"token_accuracy", p.token_accuracy}});
  }
  j["points"] = std::move(pts);

  std::ofstream jf(json_path, std::ios::trunc);
  if (!jf) throw std::runtime_error("write_curves: cannot open " + json_path);
  jf << j.dump(2) << '\n';
  if (!jf) throw std::runtime_error("write_curves: failed writing " + json_path);

  std::ofstream cf(csv_path, std::ios::trunc);
  if (!cf) throw std::runtime_error("write_curves: cannot open " + csv_path);
  cf << curves_csv(cs);
  if (!cf) throw std::runtime_error("write_curves: failed writing " + csv_path);
}

CurveSet read_curves(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("read_curves: cannot open " + json_path);
  nlohmann::json j;
  in >> j;

  CurveSet cs;
  const nlohmann::json& meta = j.at("metadata");
  cs.seed = meta.at("seed").get<std::uint64_t>();
  cs.spec_hash = meta.at("spec_hash").get<std::string>();
  cs.timestamp = meta.at("timestamp").get<std::string>();
  for (const nlohmann::json& p : j.at("points")) {
    CurvePoint pt;
    pt.model = p.at("model").get<std::string>();
    pt.lambda = p.at("lambda").get<double>();
    pt.step_frames = p.at("step_frames").get<int>();
    pt.al = p.at("al").get<double>();
    pt.dal = p.at("dal").get<double>();
    pt.bleu = p.at("bleu").get<double>();
    pt.token_accuracy = p.at("token_accuracy").get<double>();
    cs.points.push_back(std::move(pt));
  }
  return cs;
}

CurveSet read_curves_csv(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("read_curves_csv: cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line) || line != curves_csv_header())
    throw std::runtime_error("read_curves_csv: unexpected header in " + csv_path);

  CurveSet cs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream row(line);
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw std::runtime_error("read_curves_csv: expected 7 fields, got " +
                               std::to_string(fields.size()) + " in '" + line + "'");
    CurvePoint pt;
    pt.model = fields[0];
    pt.lambda = parse_double(fields[1], "lambda");
    pt.step_frames = parse_int(fields[2], "step_frames");
    pt.al = parse_double(fields[3], "al");
    pt.dal = parse_double(fields[4], "dal");
    pt.bleu = parse_double(fields[5], "bleu");
    pt.token_accuracy = parse_double(fields[6], "token_accuracy");
    cs.points.push_back(std::move(pt));
  }
  return cs;
}

CompareResult compare(const CurveSet& baseline, const CurveSet& treatment) {
  if (!baseline.spec_hash.empty() && !treatment.spec_hash.empty() &&
      baseline.spec_hash != treatment.spec_hash)
    throw std::invalid_argument("compare: curve sets come from different test corpora");

  const auto key = [](const CurvePoint& p) { return std::tie(p.al, p.model, p.step_frames); };
  const auto by_key = [&key](const CurvePoint& a, const CurvePoint& b) { return key(a) < key(b); };
  std::vector<CurvePoint> base = baseline.points;
  std::vector<CurvePoint> treat = treatment.points;
  std::sort(base.begin(), base.end(), by_key);
  std::sort(treat.begin(), treat.end(), by_key);

  // Ascending treatment latency, each baseline point spent at most once:
  // overlapping curves pair up assortatively instead of piling onto one
  // baseline point, and ties resolve to the earliest point in sort order.
  std::vector<char> used(base.size(), 0);
  CompareResult r;
  for (const CurvePoint& t : treat) {
    int best = -1;
    for (int i = 0; i < static_cast<int>(base.size()); ++i) {
      if (used[static_cast<size_t>(i)] || base[static_cast<size_t>(i)].al < t.al) continue;
      if (best < 0 || base[static_cast<size_t>(i)].al < base[static_cast<size_t>(best)].al)
        best = i;
    }
    if (best < 0) {
      ++r.unpaired;
      continue;
    }
    used[static_cast<size_t>(best)] = 1;
    ComparePair pr;
    pr.baseline = base[static_cast<size_t>(best)];
    pr.treatment = t;
    pr.delta_bleu = pr.treatment.bleu - pr.baseline.bleu;
    pr.pct_gain =
        pr.baseline.bleu != 0.0 ? 100.0 * pr.delta_bleu / pr.baseline.bleu : 0.0;
    r.pairs.push_back(std::move(pr));
  }

  if (!r.pairs.empty()) {
    r.comparable = true;
    for (const ComparePair& p : r.pairs) {
      r.mean_delta_bleu += p.delta_bleu;
      r.mean_pct_gain += p.pct_gain;
    }
    r.mean_delta_bleu /= static_cast<double>(r.pairs.size());
    r.mean_pct_gain /= static_cast<double>(r.pairs.size());
  }
  return r;
}

std::string format_compare(const CompareResult& r) {
  if (!r.comparable) return "no comparable points\n";
  std::string out =
      "  base_bleu    base_al  treat_bleu   treat_al  delta_bleu  pct_gain\n";
  char buf[160];
  for (const ComparePair& p : r.pairs) {
    std::snprintf(buf, sizeof buf, "%11.2f %10.2f %11.2f %10.2f %11.2f %8.2f%%\n",
                  p.baseline.bleu, p.baseline.al, p.treatment.bleu, p.treatment.al,
                  p.delta_bleu, p.pct_gain);
    out += buf;
  }
  std::snprintf(buf, sizeof buf,
                "mean delta_bleu %.2f, mean pct_gain %.2f%% over %d pairs (%d unpaired)\n",
                r.mean_delta_bleu, r.mean_pct_gain, static_cast<int>(r.pairs.size()),
                r.unpaired);
  out += buf;
  return out;
}

}  // namespace simul
