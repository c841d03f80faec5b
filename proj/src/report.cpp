// SPDX-License-Identifier: Apache-2.0
#include "vitptq/report.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "vitptq/errors.hpp"

namespace vitptq::io {

namespace {

using nlohmann::json;

template <typename T>
T take(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::size_t take_count(const json& j, const char* key) {
  if (!j.at(key).is_number_unsigned()) throw FormatError(std::string("config key '") + key + "' must be a non-negative integer");
  return j.at(key).get<std::size_t>();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

json RunConfig::to_json() const {
  const recon::ReconConfig& r = recon;
  json j = {{"bits_w", r.bits_w},
            {"bits_a", r.bits_a},
            {"rank_set", r.rank_set},
            {"search_iters", r.search_iters},
            {"calib_iters", r.calib_iters},
            {"batch_size", r.batch_size},
            {"adapter_lr", r.adapter_lr},
            {"interval_lr", r.interval_lr},
            {"arch_lr", r.arch_lr},
            {"hardness_refresh_every", r.hardness_refresh_every},
            {"seed", r.seed},
            {"lambda0", r.lambda0},
            {"drop_path_rate", r.drop_path_rate},
            {"record_every", r.record_every},
            {"use_lowrank", r.use_lowrank},
            {"use_dfq", r.use_dfq},
            {"use_curriculum", r.use_curriculum},
            {"fixed_rank", r.fixed_rank ? json(*r.fixed_rank) : json()},
            {"model", model_path},
            {"calib", calib_path}};
  return j;
}

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  if (!j.is_object()) throw FormatError("run config must be a JSON object");
  static const std::set<std::string> known = {
      "bits_w",  "bits_a",         "rank_set",    "search_iters", "calib_iters",    "batch_size",
      "adapter_lr", "interval_lr", "arch_lr",     "hardness_refresh_every", "seed", "lambda0",
      "drop_path_rate", "record_every", "use_lowrank", "use_dfq",  "use_curriculum", "fixed_rank",
      "model",   "calib"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw FormatError("unknown run config key '" + k + "'");
  }
  RunConfig c = base;
  recon::ReconConfig& r = c.recon;
  if (j.contains("bits_w")) r.bits_w = take<int>(j, "bits_w");
  if (j.contains("bits_a")) r.bits_a = take<int>(j, "bits_a");
  if (j.contains("rank_set")) r.rank_set = take<std::vector<std::size_t>>(j, "rank_set");
  if (j.contains("search_iters")) r.search_iters = take_count(j, "search_iters");
  if (j.contains("calib_iters")) r.calib_iters = take_count(j, "calib_iters");
  if (j.contains("batch_size")) r.batch_size = take_count(j, "batch_size");
  if (j.contains("adapter_lr")) r.adapter_lr = take<double>(j, "adapter_lr");
  if (j.contains("interval_lr")) r.interval_lr = take<double>(j, "interval_lr");
  if (j.contains("arch_lr")) r.arch_lr = take<double>(j, "arch_lr");
  if (j.contains("hardness_refresh_every")) r.hardness_refresh_every = take_count(j, "hardness_refresh_every");
  if (j.contains("seed")) r.seed = take_count(j, "seed");
  if (j.contains("lambda0")) r.lambda0 = take<double>(j, "lambda0");
  if (j.contains("drop_path_rate")) r.drop_path_rate = take<double>(j, "drop_path_rate");
  if (j.contains("record_every")) r.record_every = take_count(j, "record_every");
  if (j.contains("use_lowrank")) r.use_lowrank = take<bool>(j, "use_lowrank");
  if (j.contains("use_dfq")) r.use_dfq = take<bool>(j, "use_dfq");
  if (j.contains("use_curriculum")) r.use_curriculum = take<bool>(j, "use_curriculum");
  if (j.contains("fixed_rank")) {
    if (j["fixed_rank"].is_null()) {
      r.fixed_rank.reset();
    } else {
      r.fixed_rank = take_count(j, "fixed_rank");
    }
  }
  if (j.contains("model")) c.model_path = take<std::string>(j, "model");
  if (j.contains("calib")) c.calib_path = take<std::string>(j, "calib");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void RunConfig::validate() const {
  try {
    recon.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
}

json report_to_json(const recon::QuantizationReport& r) {
  RunConfig rc;
  rc.recon = r.config;
  json cfg = rc.to_json();
  cfg.erase("model");
  cfg.erase("calib");
  json blocks = json::array();
  for (const auto& b : r.blocks) {
    json search = json::array();
    for (const auto& s : b.search) {
      search.push_back({{"layer", s.layer},
                        {"in_features", s.in_features},
                        {"out_features", s.out_features},
                        {"candidates", s.candidates},
                        {"trajectory_iters", s.trajectory_iters},
                        {"alpha_trajectory", s.alpha_trajectory},
                        {"final_alpha", s.final_alpha},
                        {"chosen_rank", s.chosen_rank},
                        {"search_overhead", s.search_overhead},
                        {"warnings", s.warnings}});
    }
    json plans = json::array();
    for (const auto& [layer, p] : b.plans) {
      plans.push_back({{"layer", layer},
                       {"scale", p.scale},
                       {"zero_point", p.zero_point},
                       {"channel_scale", p.channel_scale},
                       {"channel_zero", p.channel_zero}});
    }
    blocks.push_back({{"index", b.index},
                      {"baseline_loss", b.baseline_loss},
                      {"initial_loss", b.initial_loss},
                      {"final_loss", b.final_loss},
                      {"reparam_loss", b.reparam_loss},
                      {"trajectory_iters", b.trajectory_iters},
                      {"trajectory", b.trajectory},
                      {"subset_sizes", b.subset_sizes},
                      {"search", std::move(search)},
                      {"ranks", b.ranks},
                      {"interval", b.interval ? json{b.interval->first, b.interval->second} : json()},
                      {"reparam", std::move(plans)}});
  }
  return {{"config", std::move(cfg)}, {"blocks", std::move(blocks)}};
}

std::map<std::string, std::string> report_csv(const json& report) {
  if (!report.is_object() || !report.contains("blocks") || !report["blocks"].is_array()) {
    throw FormatError("report has no block list");
  }
  std::ostringstream blocks, losses, alpha, intervals, ranks;
  blocks << "block,baseline_loss,initial_loss,final_loss,reparam_loss\n";
  losses << "block,iter,loss,subset_size\n";
  alpha << "block,layer,iter,rank,alpha\n";
  intervals << "block,b1,b2\n";
  ranks << "block,layer,in_features,out_features,rank,adapter_params\n";
  try {
    for (const json& b : report["blocks"]) {
      const std::size_t i = b.at("index").get<std::size_t>();
      blocks << i << ',' << num(b.at("baseline_loss").get<double>()) << ',' << num(b.at("initial_loss").get<double>())
             << ',' << num(b.at("final_loss").get<double>()) << ',' << num(b.at("reparam_loss").get<double>()) << '\n';
      const auto& it = b.at("trajectory_iters");
      for (std::size_t k = 0; k < it.size(); ++k) {
        losses << i << ',' << it[k].get<std::size_t>() << ',' << num(b.at("trajectory")[k].get<double>()) << ','
               << b.at("subset_sizes")[k].get<std::size_t>() << '\n';
      }
      std::map<std::string, std::pair<std::size_t, std::size_t>> dims;
      for (const json& s : b.at("search")) {
        const std::string layer = s.at("layer").get<std::string>();
        dims[layer] = {s.at("in_features").get<std::size_t>(), s.at("out_features").get<std::size_t>()};
        const auto& cand = s.at("candidates");
        const auto& iters = s.at("trajectory_iters");
        for (std::size_t k = 0; k < iters.size(); ++k) {
          const auto& a = s.at("alpha_trajectory")[k];
          for (std::size_t m = 0; m < cand.size(); ++m) {
            alpha << i << ',' << layer << ',' << iters[k].get<std::size_t>() << ',' << cand[m].get<std::size_t>()
                  << ',' << num(a[m].get<double>()) << '\n';
          }
        }
      }
      const json& itv = b.at("interval");
      if (!itv.is_null()) intervals << i << ',' << num(itv[0].get<double>()) << ',' << num(itv[1].get<double>()) << '\n';
      for (const auto& [layer, r] : b.at("ranks").items()) {
        const std::size_t rank = r.get<std::size_t>();
        ranks << i << ',' << layer << ',';
        if (auto d = dims.find(layer); d != dims.end()) {
          ranks << d->second.first << ',' << d->second.second << ',' << rank << ','
                << rank * (d->second.first + d->second.second) << '\n';
        } else {
          ranks << ",," << rank << ",\n";
        }
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return {{"blocks.csv", blocks.str()},
          {"losses.csv", losses.str()},
          {"alpha.csv", alpha.str()},
          {"intervals.csv", intervals.str()},
          {"ranks.csv", ranks.str()}};
}

}  // namespace vitptq::io
