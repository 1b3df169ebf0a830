#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "miner/error.hpp"
#include "miner/service.hpp"

namespace miner {

using nlohmann::json;

namespace {

double percent(std::size_t part, std::size_t whole) {
  return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

json build_report(const std::vector<std::string>& lines) {
  std::optional<std::size_t> initial;
  std::optional<json> terminated;
  json config;
  std::map<int, json> rows;  // last evaluation per round
  std::map<int, std::pair<std::size_t, std::size_t>> pseudo_by_round;  // (assigned, agreeing)
  std::size_t assigned = 0, agreeing = 0, audited = 0;

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json e;
    try {
      e = json::parse(lines[i]);
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::MalformedRecord, "runlog line " + std::to_string(i + 1) + ": " + ex.what());
    }
    const auto type = e.at("type").get<std::string>();
    const int round = e.at("round").get<int>();
    const auto& data = e.at("data");
    if (type == "run-started") {
      initial = data.at("pre_given_annotations").get<std::size_t>();
      config = data.at("config");
    } else if (type == "evaluation") {
      rows[round] = data;
    } else if (type == "pseudo-assigned") {
      auto& [n, ok] = pseudo_by_round[round];
      for (const auto& item : data.at("items")) {
        ++n;
        ++assigned;
        const auto& agrees = item.at("gt_agrees");
        if (agrees.is_boolean()) {
          ++audited;
          if (agrees.get<bool>()) {
            ++ok;
            ++agreeing;
          }
        }
      }
    } else if (type == "terminated") {
      terminated = data;
    }
  }
  if (!initial) throw Error(ErrorCode::IncompleteRun, "runlog has no run-started event");
  if (!terminated) throw Error(ErrorCode::IncompleteRun, "runlog has no termination event");

  json series = json::array();
  for (const auto& [round, data] : rows) {
    const auto used = data.at("annotations_used").get<std::size_t>();
    const auto pseudo = data.at("pseudo_count").get<std::size_t>();
    const auto it = pseudo_by_round.find(round);
    json precision = nullptr;
    if (it != pseudo_by_round.end() && it->second.first > 0)
      precision = static_cast<double>(it->second.second) / static_cast<double>(it->second.first);
    series.push_back({{"round", round},
                      {"annotations_used", used},
                      {"annotated_pct", percent(used, *initial)},
                      {"pseudo_count", pseudo},
                      {"pseudo_pct", percent(pseudo, *initial)},
                      {"map", data.at("map")},
                      {"pseudo_assignments", it == pseudo_by_round.end() ? 0 : it->second.first},
                      {"pseudo_precision", precision}});
  }
  return {{"pre_given_annotations", *initial},
          {"config", config},
          {"termination_reason", terminated->at("reason")},
          {"rounds", terminated->at("rounds")},
          {"final_map", terminated->at("map")},
          {"annotated_pct", percent(terminated->at("annotations_used").get<std::size_t>(), *initial)},
          {"pseudo_pct", percent(terminated->at("pseudo_count").get<std::size_t>(), *initial)},
          {"pseudo_assignments", assigned},
          {"pseudo_precision", audited == 0 ? json(nullptr) : json(static_cast<double>(agreeing) / audited)},
          {"series", series}};
}

std::string render_report(const json& r) {
  std::ostringstream out;
  out << "termination: " << r.at("termination_reason").get<std::string>() << " after "
      << r.at("rounds").get<int>() << " rounds\n";
  out << "pre-given annotations: " << r.at("pre_given_annotations").get<std::size_t>() << '\n';
  if (!r.at("final_map").is_null()) out << "final mAP: " << fixed(100.0 * r.at("final_map").get<double>(), 2) << '\n';
  out << "annotated: " << fixed(r.at("annotated_pct").get<double>(), 2) << "%  pseudo: "
      << fixed(r.at("pseudo_pct").get<double>(), 2) << "%\n";
  if (!r.at("pseudo_precision").is_null())
    out << "pseudo-label precision: " << fixed(100.0 * r.at("pseudo_precision").get<double>(), 2) << "% of "
        << r.at("pseudo_assignments").get<std::size_t>() << " assignments\n";
  out << "\nround  annotated%  pseudo%     mAP\n";
  for (const auto& row : r.at("series")) {
    char line[128];
    std::snprintf(line, sizeof line, "%5d  %10.2f  %7.2f  %6.2f\n", row.at("round").get<int>(),
                  row.at("annotated_pct").get<double>(), row.at("pseudo_pct").get<double>(),
                  100.0 * row.at("map").get<double>());
    out << line;
  }
  return out.str();
}

json write_report(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "runlog.jsonl", std::ios::binary);
  if (!in) throw Error(ErrorCode::IncompleteRun, "no runlog.jsonl in " + run_dir.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  auto report = build_report(lines);
  std::ofstream(run_dir / "report.json", std::ios::binary | std::ios::trunc) << report.dump(2) << '\n';
  std::ofstream(run_dir / "report.txt", std::ios::binary | std::ios::trunc) << render_report(report);
  return report;
}

}  // namespace miner
