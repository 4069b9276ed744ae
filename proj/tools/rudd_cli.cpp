#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "rudd/distill.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Plain key = value text; '#' starts a comment.
std::map<std::string, std::string> parse_kv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int ln = 0;
  while (std::getline(is, line)) {
    ++ln;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(ln) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError(path + ":" + std::to_string(ln) + ": empty key or value");
    if (kv.count(key)) throw ConfigError(path + ":" + std::to_string(ln) + ": duplicate key '" + key + "'");
    kv[key] = val;
  }
  return kv;
}

template <class T>
T parse_num(const std::string& key, const std::string& val) {
  std::istringstream ss(val);
  T out;
  ss >> out;
  if (ss.fail() || !ss.eof()) throw ConfigError("config key '" + key + "': bad value '" + val + "'");
  return out;
}

rudd::RunConfig load_config(const std::string& path) {
  auto kv = parse_kv(path);
  for (const char* req : {"K", "H", "W", "spc", "L", "loss", "lambda_hi", "lambda_lo"})
    if (!kv.count(req)) throw ConfigError("config: missing required key '" + std::string(req) + "'");

  rudd::RunConfig c;
  auto seen = kv;
  auto s = [&](const char* k, std::string& dst) {
    if (kv.count(k)) {
      dst = kv[k];
      seen.erase(k);
    }
  };
  auto gi = [&](const char* k, int& dst) {
    if (kv.count(k)) {
      dst = parse_num<int>(k, kv[k]);
      seen.erase(k);
    }
  };
  auto gl = [&](const char* k, long& dst) {
    if (kv.count(k)) {
      dst = parse_num<long>(k, kv[k]);
      seen.erase(k);
    }
  };
  auto gd = [&](const char* k, double& dst) {
    if (kv.count(k)) {
      dst = parse_num<double>(k, kv[k]);
      seen.erase(k);
    }
  };
  s("dataset", c.dataset);
  gi("K", c.K);
  gi("per_class", c.per_class);
  gi("H", c.H);
  gi("W", c.W);
  gi("spc", c.spc);
  gi("L", c.L);
  gi("context", c.ent.context_length);
  gi("ent_width", c.ent.width);
  gi("ent_depth", c.ent.depth);
  s("decoder", c.decoder);
  gi("dec_d1", c.dec_d1);
  gi("dec_d2", c.dec_d2);
  s("loss", c.loss);
  gd("beta", c.beta);
  gd("lambda_hi", c.lambda_hi);
  gd("lambda_lo", c.lambda_lo);
  gl("phase1_steps", c.phase1_steps);
  gl("phase2_steps", c.phase2_steps);
  gd("mse_budget", c.mse_budget);
  gd("init_lr", c.init_lr);
  gd("joint_lr", c.joint_lr);
  gi("clf_blocks", c.clf.blocks);
  gi("clf_channels", c.clf.channels);
  gi("batch_per_class", c.batch_per_class);
  gi("gm_inner_steps", c.gm_inner_steps);
  gd("inner_lr", c.inner_lr);
  gi("tm_expert_steps", c.tm_expert_steps);
  gi("tm_t1", c.tm_t1);
  gi("tm_t2", c.tm_t2);
  gd("tm_lr", c.tm_lr);
  gi("eval_steps", c.eval_steps);
  gd("eval_lr", c.eval_lr);
  gi("eval_batch_per_class", c.eval_batch_per_class);
  gi("trials", c.trials);
  if (kv.count("seed")) {
    c.seed = parse_num<uint64_t>("seed", kv["seed"]);
    seen.erase("seed");
  }
  s("out_dir", c.out_dir);
  if (!seen.empty()) throw ConfigError("config: unknown key '" + seen.begin()->first + "'");
  if (c.loss != "gm" && c.loss != "tm" && c.loss != "dm")
    throw ConfigError("config: loss must be gm, tm, or dm");
  if (c.spc < 1) throw ConfigError("config: spc must be >= 1");
  c.decoder_config();  // validates preset name
  return c;
}

rudd::LabeledImageSet train_set(const rudd::RunConfig& c) {
  if (c.dataset == "toy") return rudd::generate_toy(c.K, c.per_class, c.H, c.W, c.seed);
  return rudd::load_images(c.dataset);
}

rudd::LabeledImageSet test_set(const rudd::RunConfig& c) {
  if (c.dataset == "toy") return rudd::generate_toy(c.K, c.per_class, c.H, c.W, c.seed ^ 0x7e57);
  return rudd::load_images(c.dataset);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

json allocation_json(const rudd::BitAllocation& a, int K) {
  json j;
  j["explicit_bits"] = a.explicit_bits;
  j["implicit_bits"] = a.implicit_bits;
  j["label_bits"] = a.label_bits;
  j["header_bits"] = a.header_bits;
  j["total_bits"] = a.total_bits();
  j["K"] = K;
  j["bpc"] = rudd::bpc(a.total_bits(), K);
  return j;
}

int cmd_distill(const rudd::RunConfig& cfg) {
  auto D = train_set(cfg);
  auto res = rudd::run_algorithm1(cfg, D);
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "distilled.rudd", std::ios::binary);
    os.write(reinterpret_cast<const char*>(res.stream.bytes.data()), long(res.stream.bytes.size()));
  }
  rudd::write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), res.metrics);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "allocation.json");
    os << allocation_json(res.stream.allocation, cfg.K).dump(2) << "\n";
  }
  std::cout << "bpc " << rudd::bpc(res.stream, cfg.K) << " (" << res.stream.bytes.size()
            << " bytes, K=" << cfg.K << ")\n";
  return 0;
}

int cmd_bpc(const std::string& file) {
  auto bytes = read_file(file);
  auto alloc = rudd::read_allocation(bytes);
  const int K = rudd::read_class_count(bytes);
  std::cout << "total    " << alloc.total_bits() << " bits\n"
            << "explicit " << alloc.explicit_bits << " bits (latents)\n"
            << "implicit " << alloc.implicit_bits << " bits (network weights)\n"
            << "labels   " << alloc.label_bits << " bits\n"
            << "header   " << alloc.header_bits << " bits\n"
            << "bpc      " << rudd::bpc(alloc.total_bits(), K) << " (K=" << K << ")\n";
  std::cout << allocation_json(alloc, K).dump() << "\n";
  return 0;
}

int cmd_eval(const rudd::RunConfig& cfg, const std::string& file) {
  auto ds = rudd::decode_dataset(read_file(file));
  auto test = test_set(cfg);
  auto r = rudd::evaluate(ds, test, cfg.clf, cfg.trials, cfg.eval_steps, cfg.eval_lr,
                          cfg.eval_batch_per_class, cfg.seed);
  std::cout << "accuracy " << r.mean << " +- " << r.stddev << " over " << cfg.trials << " trials\n";
  return 0;
}

int cmd_curve(const rudd::RunConfig& base, std::vector<double> lambdas) {
  std::sort(lambdas.begin(), lambdas.end());
  auto D = train_set(base);
  auto test = test_set(base);
  fs::create_directories(base.out_dir);
  std::ofstream os(fs::path(base.out_dir) / "curve.csv");
  os << "lambda,bpc,acc_mean,acc_std\n";
  for (double lam : lambdas) {
    rudd::RunConfig cfg = base;
    cfg.lambda_lo = lam;
    cfg.lambda_hi = std::max(cfg.lambda_hi, lam);
    auto res = rudd::run_algorithm1(cfg, D);
    auto ev = rudd::evaluate(res.coded, test, cfg.clf, cfg.trials, cfg.eval_steps, cfg.eval_lr,
                             cfg.eval_batch_per_class, cfg.seed);
    os << lam << "," << rudd::bpc(res.stream, cfg.K) << "," << ev.mean << "," << ev.stddev << "\n";
    std::cout << "lambda " << lam << ": bpc " << rudd::bpc(res.stream, cfg.K) << ", acc " << ev.mean
              << " +- " << ev.stddev << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rate-utility dataset distillation"};
  app.require_subcommand(1);

  std::string config_path, stream_file, lambda_list;
  long long seed_flag = -1;
  std::string out_flag;
  int threads = 0;

  app.add_option("--threads", threads, "OpenMP thread count (env RUDD_THREADS as fallback)");

  auto* distill = app.add_subcommand("distill", "run the three-phase pipeline");
  distill->add_option("--config", config_path, "key = value config file")->required();
  distill->add_option("--seed", seed_flag, "override config seed");
  distill->add_option("--out", out_flag, "override output directory");

  auto* bpc_cmd = app.add_subcommand("bpc", "print bits-per-class decomposition of a stream");
  bpc_cmd->add_option("stream", stream_file, "bitstream file")->required();

  auto* eval = app.add_subcommand("eval", "train on a decoded stream and report test accuracy");
  eval->add_option("--config", config_path, "config (test-set spec and eval params)")->required();
  eval->add_option("stream", stream_file, "bitstream file")->required();
  eval->add_option("--seed", seed_flag, "override config seed");

  auto* curve = app.add_subcommand("curve", "rate-utility frontier over a lambda_lo grid");
  curve->add_option("--config", config_path, "base config")->required();
  curve->add_option("--lambdas", lambda_list, "comma-separated lambda_lo values")->required();
  curve->add_option("--seed", seed_flag, "override config seed");
  curve->add_option("--out", out_flag, "override output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (threads <= 0)
    if (const char* env = std::getenv("RUDD_THREADS")) threads = std::atoi(env);
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (app.got_subcommand(bpc_cmd)) return cmd_bpc(stream_file);

    rudd::RunConfig cfg = load_config(config_path);
    if (seed_flag >= 0) cfg.seed = uint64_t(seed_flag);
    if (!out_flag.empty()) cfg.out_dir = out_flag;

    if (app.got_subcommand(distill)) return cmd_distill(cfg);
    if (app.got_subcommand(eval)) return cmd_eval(cfg, stream_file);
    if (app.got_subcommand(curve)) {
      std::vector<double> lambdas;
      std::stringstream ss(lambda_list);
      std::string tok;
      while (std::getline(ss, tok, ',')) lambdas.push_back(std::stod(tok));
      if (lambdas.empty()) throw ConfigError("--lambdas: empty list");
      return cmd_curve(cfg, lambdas);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
