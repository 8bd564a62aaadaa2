#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chunkssl/error.hpp"

namespace chunkssl {

// ---------------------------------------------------------------------------
// Token quality

/// Co-occurrence counts n(token, phone) at aligned frames.
struct JointCounts {
  std::map<std::uint64_t, std::map<int, std::uint64_t>> n;

  void add(std::uint64_t token, int phone, std::uint64_t count = 1) { n[token][phone] += count; }

  void merge(const JointCounts& other) {
    for (const auto& [t, row] : other.n)
      for (const auto& [p, c] : row) n[t][p] += c;
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (const auto& [_, row] : n)
      for (const auto& [__, c] : row) s += c;
    return s;
  }

  /// Dense table: rows are tokens, columns phones.
  static JointCounts from_table(const std::vector<std::vector<std::uint64_t>>& table) {
    JointCounts j;
    for (std::size_t t = 0; t < table.size(); ++t)
      for (std::size_t p = 0; p < table[t].size(); ++p)
        if (table[t][p] > 0) j.add(t, static_cast<int>(p), table[t][p]);
    return j;
  }
};

inline double phone_purity(const JointCounts& counts) {
  const std::uint64_t total = counts.total();
  if (total == 0) throw UsageError("phone_purity: empty count table");
  std::uint64_t hit = 0;
  for (const auto& [_, row] : counts.n) {
    std::uint64_t best = 0;
    for (const auto& [__, c] : row) best = std::max(best, c);
    hit += best;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

/// I(phone; token) / H(phone), natural log, plug-in estimates.
inline double pnmi(const JointCounts& counts) {
  const double total = static_cast<double>(counts.total());
  if (total == 0) throw UsageError("pnmi: empty count table");
  std::map<int, double> phone;
  std::map<std::uint64_t, double> token;
  for (const auto& [t, row] : counts.n)
    for (const auto& [p, c] : row) {
      phone[p] += static_cast<double>(c);
      token[t] += static_cast<double>(c);
    }
  double h = 0;
  for (const auto& [_, c] : phone) {
    const double q = c / total;
    h -= q * std::log(q);
  }
  if (!(h > 0)) throw UsageError("pnmi: phone entropy is zero, ratio undefined");
  double mi = 0;
  for (const auto& [t, row] : counts.n)
    for (const auto& [p, c] : row) {
      if (c == 0) continue;
      const double joint = static_cast<double>(c) / total;
      mi += joint * std::log(joint * total * total / (token[t] * phone[p]));
    }
  return std::clamp(mi / h, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Latency

/// Source consumed (same unit as source_length) when each target token was
/// emitted.
struct DelaySequence {
  double source_length = 0;
  std::vector<double> delays;
  std::optional<double> reference_length;  // |Y*|; defaults to |Y|

  std::size_t target_length() const { return delays.size(); }

  void validate() const {
    if (delays.empty()) throw UsageError("latency: empty delay sequence");
    if (!(source_length > 0)) throw UsageError("latency: source length must be positive");
    for (std::size_t i = 0; i < delays.size(); ++i) {
      if (!(delays[i] > 0) || delays[i] > source_length) {
        throw UsageError("latency: delay " + std::to_string(i + 1) + " outside (0, |X|]");
      }
      if (i > 0 && delays[i] < delays[i - 1]) throw UsageError("latency: delays must be non-decreasing");
    }
    if (reference_length && !(*reference_length > 0)) throw UsageError("latency: reference length must be positive");
  }
};

struct LatencyScores {
  double laal = 0, al = 0, ap = 0, dal = 0, atd = 0;
};

namespace detail {

inline double average_lagging(const DelaySequence& s, double gamma) {
  const auto& d = s.delays;
  std::size_t tau = d.size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] >= s.source_length) {
      tau = i + 1;
      break;
    }
  }
  double sum = 0;
  for (std::size_t i = 0; i < tau; ++i) sum += d[i] - static_cast<double>(i) / gamma;
  return sum / static_cast<double>(tau);
}

}  // namespace detail

inline LatencyScores latency_scores(const DelaySequence& s) {
  s.validate();
  const auto& d = s.delays;
  const double x = s.source_length, y = static_cast<double>(d.size());
  const double ref = s.reference_length.value_or(y);
  const double gamma = y / x;
  LatencyScores out;
  out.al = detail::average_lagging(s, gamma);
  out.laal = detail::average_lagging(s, std::max(y, ref) / x);

  double sum = 0;
  for (double v : d) sum += v;
  out.ap = sum / (x * y);

  double prev = 0, dal = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double di = i == 0 ? d[0] : std::max(d[i], prev + 1.0 / gamma);
    dal += di - static_cast<double>(i) / gamma;
    prev = di;
  }
  out.dal = dal / y;

  // Simplified token delay: order-based alignment of target i to source
  // position min(ceil(i / gamma), |X|).
  double atd = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double aligned = std::min(std::ceil(static_cast<double>(i + 1) / gamma), x);
    atd += d[i] - aligned;
  }
  out.atd = atd / y;
  return out;
}

/// Delays of a chunked streaming decoder: a token emitted at frame f is
/// released once its whole chunk plus `lookahead_ms` has been read, capped at
/// the utterance length. All times in ms.
inline DelaySequence simulate_streaming_delays(double utterance_ms, double chunk_ms, double lookahead_ms,
                                               const std::vector<bool>& emissions, double frame_ms = 40.0,
                                               std::optional<double> reference_length = std::nullopt) {
  if (!(chunk_ms > 0)) throw UsageError("simulate_streaming_delays: chunk_ms must be positive");
  if (!(frame_ms > 0)) throw UsageError("simulate_streaming_delays: frame_ms must be positive");
  if (lookahead_ms < 0) throw UsageError("simulate_streaming_delays: negative look-ahead");
  const double c = std::max(1.0, std::round(chunk_ms / frame_ms));
  const double la = std::round(lookahead_ms / frame_ms);
  DelaySequence s;
  s.source_length = utterance_ms;
  s.reference_length = reference_length;
  for (std::size_t f = 0; f < emissions.size(); ++f) {
    if (!emissions[f]) continue;
    const double end = (std::ceil(static_cast<double>(f + 1) / c) * c + la) * frame_ms;
    s.delays.push_back(std::min(end, utterance_ms));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Delay records: "utt_id |X| |Y| |Y*| d_1,...,d_|Y|"

struct DelayRecord {
  std::string id;
  DelaySequence seq;
};

inline DelayRecord parse_delay_record(const std::string& line) {
  std::istringstream in(line);
  DelayRecord r;
  double x = 0, y = 0, ref = 0;
  std::string list;
  if (!(in >> r.id >> x >> y >> ref >> list)) throw FormatError("delay record: expected 5 fields in '" + line + "'");
  std::string extra;
  if (in >> extra) throw FormatError("delay record: trailing field '" + extra + "'");
  r.seq.source_length = x;
  r.seq.reference_length = ref;
  std::stringstream ds(list);
  std::string item;
  while (std::getline(ds, item, ',')) {
    std::size_t used = 0;
    try {
      r.seq.delays.push_back(std::stod(item, &used));
    } catch (const std::logic_error&) {
      throw FormatError("delay record: bad delay '" + item + "'");
    }
    if (used != item.size()) throw FormatError("delay record: bad delay '" + item + "'");
  }
  if (static_cast<double>(r.seq.delays.size()) != y) {
    throw FormatError("delay record " + r.id + ": |Y| = " + std::to_string(static_cast<long>(y)) + " but " +
                      std::to_string(r.seq.delays.size()) + " delays given");
  }
  try {
    r.seq.validate();
  } catch (const UsageError& e) {
    throw FormatError("delay record " + r.id + ": " + e.what());
  }
  return r;
}

inline std::string format_latency_row(const std::string& id, const LatencyScores& s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << id << '\t' << s.laal << '\t' << s.al << '\t' << s.ap << '\t' << s.dal
     << '\t' << s.atd;
  return os.str();
}

inline constexpr const char* kLatencyHeader = "utt_id\tLAAL\tAL\tAP\tDAL\tATD";

}  // namespace chunkssl
