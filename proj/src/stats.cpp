#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sima/evalharness.hpp"

namespace sima::eval {

RateCI success_rate(std::size_t successes, std::size_t n) {
  if (n == 0) throw Error("success_rate needs at least one outcome");
  if (successes > n) throw Error("more successes than outcomes");
  RateCI out;
  out.n = n;
  out.rate = static_cast<double>(successes) / static_cast<double>(n);
  out.ci95 = 1.96 * std::sqrt(out.rate * (1.0 - out.rate) / static_cast<double>(n));
  out.lo = std::clamp(out.rate - out.ci95, 0.0, 1.0);
  out.hi = std::clamp(out.rate + out.ci95, 0.0, 1.0);
  return out;
}

RateCI success_rate(std::span<const EpisodeOutcome> outcomes) {
  auto s = std::count_if(outcomes.begin(), outcomes.end(),
                         [](const EpisodeOutcome& o) { return o.status == EpisodeStatus::kSuccess; });
  return success_rate(static_cast<std::size_t>(s), outcomes.size());
}

RateCI mean_rate(std::span<const double> scores) {
  if (scores.empty()) throw Error("mean_rate needs at least one score");
  RateCI out;
  out.n = scores.size();
  out.rate = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  out.ci95 = 1.96 * std::sqrt(out.rate * (1.0 - out.rate) / static_cast<double>(scores.size()));
  out.lo = std::clamp(out.rate - out.ci95, 0.0, 1.0);
  out.hi = std::clamp(out.rate + out.ci95, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Judgments

bool aggregate_judgments(std::span<const JudgmentRecord> records) {
  if (records.empty()) throw SpecError("no judgments to aggregate");
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t yes = 0;
  for (const auto& r : records) {
    if (!seen.insert({r.episode_id, r.judge_id}).second) {
      throw SpecError("duplicate judgment from " + r.judge_id + " for " + r.episode_id);
    }
    if (r.rating == Rating::kSuccess) ++yes;
  }
  return 2 * yes > records.size();
}

std::string judgment_to_json(const JudgmentRecord& r) {
  nlohmann::ordered_json j;
  j["episode_id"] = r.episode_id;
  j["judge_id"] = r.judge_id;
  j["rating"] = r.rating == Rating::kSuccess ? "success" : "failure";
  j["note"] = r.note;
  return j.dump();
}

std::vector<JudgmentRecord> parse_judgments(const std::string& text) {
  std::vector<JudgmentRecord> out;
  std::set<std::pair<std::string, std::string>> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw SpecError("judgment line " + std::to_string(lineno) + " is not JSON");
    JudgmentRecord r;
    try {
      r.episode_id = j.at("episode_id").get<std::string>();
      r.judge_id = j.at("judge_id").get<std::string>();
      auto rating = j.at("rating").get<std::string>();
      if (rating == "success") {
        r.rating = Rating::kSuccess;
      } else if (rating == "failure") {
        r.rating = Rating::kFailure;
      } else {
        throw SpecError("judgment line " + std::to_string(lineno) + ": rating must be success or failure");
      }
      r.note = j.value("note", "");
    } catch (const nlohmann::json::exception& e) {
      throw SpecError("judgment line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert({r.episode_id, r.judge_id}).second) {
      throw SpecError("duplicate judgment from " + r.judge_id + " for " + r.episode_id);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

RelativeScore normalize_vs_specialist(const std::map<std::string, double>& agent_rates,
                                      const std::map<std::string, double>& specialist_rates) {
  RelativeScore out;
  double sum = 0.0;
  for (const auto& [world, spec_rate] : specialist_rates) {
    auto it = agent_rates.find(world);
    if (it == agent_rates.end()) throw SpecError("no agent rate for world " + world);
    if (spec_rate <= 0.0) {
      out.excluded.push_back(world);
      continue;
    }
    double rel = 100.0 * it->second / spec_rate;
    out.per_world[world] = rel;
    sum += rel;
  }
  if (!out.per_world.empty()) out.aggregate = sum / static_cast<double>(out.per_world.size());
  return out;
}

// ---------------------------------------------------------------------------
// Permutation tests

namespace {

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Scores are sums of a handful of doubles; a tolerance keeps permutations
/// that tie the observed statistic from being lost to rounding.
bool at_least(double s, double obs) { return std::abs(s) >= std::abs(obs) - 1e-12; }

/// n choose k, saturating at limit + 1.
std::uint64_t choose_capped(std::uint64_t n, std::uint64_t k, std::uint64_t limit) {
  k = std::min(k, n - k);
  long double c = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    c = c * static_cast<long double>(n - k + i) / static_cast<long double>(i);
    if (c > static_cast<long double>(limit)) return limit + 1;
  }
  return static_cast<std::uint64_t>(std::llround(static_cast<double>(c)));
}

PermutationResult pooled(std::span<const double> a, std::span<const double> b, std::uint64_t n_resamples,
                         std::uint64_t seed, std::uint64_t limit) {
  PermutationResult out;
  out.statistic = mean(a) - mean(b);
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  const std::size_t n = all.size();
  const std::size_t na = a.size();
  const double total = std::accumulate(all.begin(), all.end(), 0.0);
  auto stat_for_sum = [&](double sum_a) {
    return sum_a / static_cast<double>(na) - (total - sum_a) / static_cast<double>(n - na);
  };

  std::uint64_t combos = choose_capped(n, na, limit);
  if (combos <= limit) {
    out.exhaustive = true;
    std::vector<std::size_t> idx(na);
    std::iota(idx.begin(), idx.end(), 0);
    std::uint64_t hits = 0;
    std::uint64_t count = 0;
    while (true) {
      double s = 0.0;
      for (std::size_t i : idx) s += all[i];
      if (at_least(stat_for_sum(s), out.statistic)) ++hits;
      ++count;
      // Next combination in lexicographic order.
      std::size_t i = na;
      while (i > 0 && idx[i - 1] == n - na + i - 1) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t j = i; j < na; ++j) idx[j] = idx[j - 1] + 1;
    }
    out.resamples = count;
    out.p = static_cast<double>(hits) / static_cast<double>(count);
    return out;
  }

  std::mt19937_64 rng(seed);
  std::uint64_t hits = 0;
  for (std::uint64_t r = 0; r < n_resamples; ++r) {
    // Partial Fisher-Yates: the first na slots become group a.
    for (std::size_t i = 0; i < na; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(all[i], all[pick(rng)]);
    }
    double s = std::accumulate(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(na), 0.0);
    if (at_least(stat_for_sum(s), out.statistic)) ++hits;
  }
  out.resamples = n_resamples;
  out.p = static_cast<double>(1 + hits) / static_cast<double>(1 + n_resamples);
  return out;
}

PermutationResult paired(std::span<const double> a, std::span<const double> b, std::uint64_t n_resamples,
                         std::uint64_t seed, std::uint64_t limit) {
  if (a.size() != b.size()) throw Error("paired permutation test needs equal-length groups");
  PermutationResult out;
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  out.statistic = mean(d);
  const std::size_t n = d.size();
  if (n < 63 && (std::uint64_t{1} << n) <= limit) {
    out.exhaustive = true;
    std::uint64_t hits = 0;
    const std::uint64_t total = std::uint64_t{1} << n;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += (mask >> i & 1) ? -d[i] : d[i];
      if (at_least(s / static_cast<double>(n), out.statistic)) ++hits;
    }
    out.resamples = total;
    out.p = static_cast<double>(hits) / static_cast<double>(total);
    return out;
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(0.5);
  std::uint64_t hits = 0;
  for (std::uint64_t r = 0; r < n_resamples; ++r) {
    double s = 0.0;
    for (double x : d) s += flip(rng) ? -x : x;
    if (at_least(s / static_cast<double>(n), out.statistic)) ++hits;
  }
  out.resamples = n_resamples;
  out.p = static_cast<double>(1 + hits) / static_cast<double>(1 + n_resamples);
  return out;
}

}  // namespace

PermutationResult permutation_test(std::span<const double> a, std::span<const double> b,
                                   std::uint64_t n_resamples, std::uint64_t seed, PermutationMode mode,
                                   std::uint64_t exhaustive_limit) {
  if (a.empty() || b.empty()) throw Error("permutation test needs two non-empty groups");
  if (n_resamples == 0) throw Error("permutation test needs at least one resample");
  return mode == PermutationMode::kPooled ? pooled(a, b, n_resamples, seed, exhaustive_limit)
                                          : paired(a, b, n_resamples, seed, exhaustive_limit);
}

}  // namespace sima::eval
