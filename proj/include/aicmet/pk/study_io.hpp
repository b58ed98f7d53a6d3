#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aicmet/pk/simulate.hpp"

namespace aicmet::pk {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kStudySchemaVersion = 1;

// Shortest round-trip decimal form; used for every CSV number so reruns are
// byte-identical.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline nlohmann::ordered_json dose_to_json(const DoseEvent& d) {
  return {{"amount", d.amount}, {"route", d.route == Route::kOral ? "oral" : "iv"}};
}

inline DoseEvent dose_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("amount") || !j.contains("route"))
    throw SchemaError(path + ": dose requires amount and route");
  DoseEvent d;
  d.amount = j.at("amount").get<double>();
  const std::string route = j.at("route").get<std::string>();
  if (route == "oral")
    d.route = Route::kOral;
  else if (route == "iv")
    d.route = Route::kIntravenous;
  else
    throw SchemaError(path + ".route: expected \"oral\" or \"iv\", got \"" + route + "\"");
  if (!(d.amount > 0.0)) throw SchemaError(path + ".amount: must be positive");
  return d;
}

inline nlohmann::ordered_json write_study(const StudyRecord& s, bool include_latents) {
  if (s.individuals.empty()) throw SchemaError("study has no individuals");
  nlohmann::ordered_json doc;
  doc["schema_version"] = kStudySchemaVersion;
  doc["study_id"] = s.study_id;
  doc["individuals"] = nlohmann::ordered_json::array();
  for (const auto& rec : s.individuals) {
    nlohmann::ordered_json ji;
    ji["dose"] = dose_to_json(rec.dose);
    ji["times"] = rec.times;
    ji["obs"] = rec.obs;
    ji["mask"] = nlohmann::ordered_json::array();
    for (uint8_t m : rec.mask) ji["mask"].push_back(m != 0);
    doc["individuals"].push_back(std::move(ji));
  }
  if (include_latents && s.latents.has_value()) {
    const StudyLatents& lat = *s.latents;
    nlohmann::ordered_json jl;
    nlohmann::ordered_json jh;
    jh["n_peripheral"] = lat.hyper.n_peripheral;
    jh["n_individuals"] = lat.hyper.n_individuals;
    jh["sigma_obs"] = lat.hyper.sigma_obs;
    jh["dose_law"] = {{"amount_lo", lat.hyper.dose_law.amount.lo},
                      {"amount_hi", lat.hyper.dose_law.amount.hi},
                      {"p_oral", lat.hyper.dose_law.p_oral}};
    jh["coords"] = nlohmann::ordered_json::array();
    for (const auto& c : lat.hyper.coords)
      jh["coords"].push_back({{"m", c.m}, {"s", c.s}, {"lambda", c.lambda}, {"sigma", c.sigma}});
    jl["hyper"] = std::move(jh);
    jl["timescales"] = {{"t_peak", lat.timescales.t_peak}, {"t_half", lat.timescales.t_half}};
    jl["design_times"] = lat.design_times;
    jl["grid"] = lat.grid;
    jl["individuals"] = nlohmann::ordered_json::array();
    for (size_t i = 0; i < lat.paths.size(); ++i) {
      nlohmann::ordered_json jp;
      jp["mu"] = lat.paths[i].mu.mu;
      jp["theta"] = lat.paths[i].theta;
      nlohmann::ordered_json js = nlohmann::ordered_json::array();
      for (const auto& st : lat.states[i]) {
        std::vector<double> row{st.gut, st.central};
        row.insert(row.end(), st.peripheral.begin(), st.peripheral.end());
        js.push_back(row);
      }
      jp["states"] = std::move(js);
      jl["individuals"].push_back(std::move(jp));
    }
    doc["latents"] = std::move(jl);
  }
  return doc;
}

inline StudyRecord read_study(const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaError("study document must be a JSON object");
  if (!doc.contains("schema_version")) throw SchemaError("schema_version: missing");
  const int version = doc.at("schema_version").get<int>();
  if (version != kStudySchemaVersion)
    throw SchemaError("schema_version: unknown version " + std::to_string(version) + ", expected " +
                      std::to_string(kStudySchemaVersion));
  StudyRecord s;
  s.study_id = doc.value("study_id", std::string("study"));
  if (!doc.contains("individuals") || !doc.at("individuals").is_array() || doc.at("individuals").empty())
    throw SchemaError("individuals: at least one individual required");
  int idx = 0;
  for (const auto& ji : doc.at("individuals")) {
    const std::string path = "individuals[" + std::to_string(idx) + "]";
    IndividualRecord rec;
    if (!ji.contains("dose")) throw SchemaError(path + ".dose: missing");
    rec.dose = dose_from_json(ji.at("dose"), path + ".dose");
    if (!ji.contains("times") || !ji.contains("obs"))
      throw SchemaError(path + ": times and obs are required");
    rec.times = ji.at("times").get<std::vector<double>>();
    rec.obs = ji.at("obs").get<std::vector<double>>();
    if (ji.contains("mask")) {
      for (const auto& m : ji.at("mask")) rec.mask.push_back(m.get<bool>() ? 1 : 0);
    } else {
      rec.mask.assign(rec.times.size(), 1);
    }
    if (rec.times.size() != rec.obs.size() || rec.times.size() != rec.mask.size())
      throw SchemaError(path + ": times, obs and mask must have equal length");
    for (size_t j = 1; j < rec.times.size(); ++j)
      if (!(rec.times[j] > rec.times[j - 1]))
        throw SchemaError(path + ".times: not strictly increasing");
    for (size_t j = 0; j < rec.obs.size(); ++j)
      if (rec.mask[j] && !(rec.obs[j] > 0.0))
        throw SchemaError(path + ".obs: valid observations must be positive");
    s.individuals.push_back(std::move(rec));
    ++idx;
  }
  // Latents are simulation-only; imported documents simply lack them.
  if (doc.contains("latents")) {
    const auto& jl = doc.at("latents");
    StudyLatents lat;
    const auto& jh = jl.at("hyper");
    lat.hyper.n_peripheral = jh.at("n_peripheral").get<int>();
    lat.hyper.n_individuals = jh.at("n_individuals").get<int>();
    lat.hyper.sigma_obs = jh.at("sigma_obs").get<double>();
    lat.hyper.dose_law.amount.lo = jh.at("dose_law").at("amount_lo").get<double>();
    lat.hyper.dose_law.amount.hi = jh.at("dose_law").at("amount_hi").get<double>();
    lat.hyper.dose_law.p_oral = jh.at("dose_law").at("p_oral").get<double>();
    for (const auto& jc : jh.at("coords")) {
      CoordinateHyperParams c;
      c.m = jc.at("m").get<double>();
      c.s = jc.at("s").get<double>();
      c.lambda = jc.at("lambda").get<double>();
      c.sigma = jc.at("sigma").get<double>();
      lat.hyper.coords.push_back(c);
    }
    lat.timescales.t_peak = jl.at("timescales").at("t_peak").get<double>();
    lat.timescales.t_half = jl.at("timescales").at("t_half").get<double>();
    lat.design_times = jl.at("design_times").get<std::vector<double>>();
    lat.grid = jl.at("grid").get<std::vector<double>>();
    for (const auto& jp : jl.at("individuals")) {
      ParameterPath path;
      path.grid = lat.grid;
      path.mu.mu = jp.at("mu").get<std::vector<double>>();
      path.theta = jp.at("theta").get<std::vector<std::vector<double>>>();
      std::vector<CompartmentState> states;
      for (const auto& row : jp.at("states")) {
        const auto v = row.get<std::vector<double>>();
        CompartmentState st;
        st.gut = v[0];
        st.central = v[1];
        st.peripheral.assign(v.begin() + 2, v.end());
        states.push_back(std::move(st));
      }
      lat.paths.push_back(std::move(path));
      lat.states.push_back(std::move(states));
    }
    s.latents = std::move(lat);
  }
  return s;
}

inline void save_study_file(const StudyRecord& s, const std::string& path, bool include_latents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << write_study(s, include_latents).dump(2) << "\n";
}

// Accepts either a single JSON object or newline-delimited JSON.
inline std::vector<StudyRecord> load_study_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<StudyRecord> studies;
  try {
    studies.push_back(read_study(nlohmann::json::parse(text)));
    return studies;
  } catch (const nlohmann::json::parse_error&) {
    // fall through to NDJSON
  }
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      studies.push_back(read_study(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (studies.empty()) throw SchemaError(path + ": no parsable study documents");
  return studies;
}

// Flat observation table for plotting.
inline std::string observations_csv(const std::vector<StudyRecord>& studies) {
  std::string out = "study_id,individual,time,concentration\n";
  for (const auto& s : studies)
    for (size_t i = 0; i < s.individuals.size(); ++i) {
      const auto& rec = s.individuals[i];
      for (size_t j = 0; j < rec.times.size(); ++j) {
        if (!rec.mask[j]) continue;
        out += s.study_id + "," + std::to_string(i) + "," + fmt_double(rec.times[j]) + "," +
               fmt_double(rec.obs[j]) + "\n";
      }
    }
  return out;
}

}  // namespace aicmet::pk
