#include "cloak/losses.hpp"

#include <json.hpp>

namespace cloak {

LossLog::LossLog(const std::string& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open loss log: " + path);
}

void LossLog::append(const LossRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["epoch"] = rec.epoch;
  j["L_c"] = rec.L_c;
  j["L_r"] = rec.L_r;
  j["obf_objective"] = rec.obf_objective;
  j["deobf_objective"] = rec.deobf_objective;
  j["lr"] = rec.lr;
  out_ << j.dump() << '\n';
  out_.flush();
}

std::vector<LossRecord> LossLog::read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open loss log: " + path);
  std::vector<LossRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    LossRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.epoch = j.value("epoch", 0);
    r.L_c = j.at("L_c").get<double>();
    r.L_r = j.at("L_r").get<double>();
    r.obf_objective = j.at("obf_objective").get<double>();
    r.deobf_objective = j.at("deobf_objective").get<double>();
    r.lr = j.value("lr", 0.0);
    out.push_back(r);
  }
  return out;
}

}  // namespace cloak
