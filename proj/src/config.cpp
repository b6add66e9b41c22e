#include "prf/config.hpp"

#include <fstream>
#include <sstream>

namespace prf {

namespace {

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw ConfigError("empty grid value");
  return out;
}

std::string grid_str(const std::vector<double>& xs) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ",";
    os << xs[i];
  }
  return os.str();
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("bad boolean for " + key + ": " + v);
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  try {
    // model knobs reuse the checkpoint config-block grammar
    if (key == "variant" || key == "c" || key == "seed" ||
        key == "gfm.samples2d" || key == "gfm.samples3d" ||
        key == "attention" || key == "ode.t1" || key == "ode.steps" ||
        key == "ndm.k" || key == "ndm.t1" || key == "ndm.steps" ||
        key == "lfm.dh" || key == "lfm.dw" || key == "voxel.q" ||
        key == "use.gfm" || key == "use.ndm" || key == "use.lfm") {
      model = ModelConfig::deserialize(model.serialize() + key + "=" + value +
                                       "\n");
      return;
    }
    if (key == "train.epochs") epochs = std::stoi(value);
    else if (key == "train.batch") batch = std::stoul(value);
    else if (key == "train.lr") lr = std::stod(value);
    else if (key == "train.weight_decay") weight_decay = std::stod(value);
    else if (key == "train.margin") margin = std::stod(value);
    else if (key == "train.rho") rho = std::stod(value);
    else if (key == "train.rho_neg") rho_neg = std::stod(value);
    else if (key == "train.aug_flip") aug_flip = parse_bool(key, value);
    else if (key == "train.aug_jitter") aug_jitter = parse_bool(key, value);
    else if (key == "train.jitter_sigma") jitter_sigma = std::stod(value);
    else if (key == "eval.tau") tau = std::stod(value);
    else if (key == "eval.kmax") k_max = std::stoul(value);
    else if (key == "synth.places") n_places = std::stoul(value);
    else if (key == "synth.revisits") revisits = std::stoul(value);
    else if (key == "synth.points") points_per_frame = std::stoul(value);
    else if (key == "synth.img_h") img_h = std::stoul(value);
    else if (key == "synth.img_w") img_w = std::stoul(value);
    else if (key == "synth.spacing") place_spacing = std::stod(value);
    else if (key == "synth.jitter") revisit_jitter = std::stod(value);
    else if (key == "perturb.alphas") alphas = parse_grid(value);
    else if (key == "perturb.rot_deg") rot_errors_deg = parse_grid(value);
    else if (key == "perturb.trans_m") trans_errors = parse_grid(value);
    else if (key == "paths.dataset") dataset_dir = value;
    else if (key == "paths.checkpoint") checkpoint = value;
    else if (key == "paths.control_checkpoint") control_checkpoint = value;
    else if (key == "paths.db") db_file = value;
    else if (key == "paths.queries") queries_file = value;
    else if (key == "paths.out") out = value;
    else throw ConfigError("unknown config key: " + key);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad value for " + key + ": " + value + " (" +
                      e.what() + ")");
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    // strip comments and surrounding whitespace
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key=value");
    cfg.apply(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os.precision(17);
  os << model.serialize();
  os << "train.epochs=" << epochs << "\n";
  os << "train.batch=" << batch << "\n";
  os << "train.lr=" << lr << "\n";
  os << "train.weight_decay=" << weight_decay << "\n";
  os << "train.margin=" << margin << "\n";
  os << "train.rho=" << rho << "\n";
  os << "train.rho_neg=" << rho_neg << "\n";
  os << "train.aug_flip=" << (aug_flip ? 1 : 0) << "\n";
  os << "train.aug_jitter=" << (aug_jitter ? 1 : 0) << "\n";
  os << "train.jitter_sigma=" << jitter_sigma << "\n";
  os << "eval.tau=" << tau << "\n";
  os << "eval.kmax=" << k_max << "\n";
  os << "synth.places=" << n_places << "\n";
  os << "synth.revisits=" << revisits << "\n";
  os << "synth.points=" << points_per_frame << "\n";
  os << "synth.img_h=" << img_h << "\n";
  os << "synth.img_w=" << img_w << "\n";
  os << "synth.spacing=" << place_spacing << "\n";
  os << "synth.jitter=" << revisit_jitter << "\n";
  os << "perturb.alphas=" << grid_str(alphas) << "\n";
  os << "perturb.rot_deg=" << grid_str(rot_errors_deg) << "\n";
  os << "perturb.trans_m=" << grid_str(trans_errors) << "\n";
  os << "paths.dataset=" << dataset_dir << "\n";
  os << "paths.checkpoint=" << checkpoint << "\n";
  os << "paths.control_checkpoint=" << control_checkpoint << "\n";
  os << "paths.db=" << db_file << "\n";
  os << "paths.queries=" << queries_file << "\n";
  os << "paths.out=" << out << "\n";
  return os.str();
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t RunConfig::hash() const { return fnv1a(serialize()); }

std::string RunConfig::hash_comment() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "# config_hash=%016llx",
                static_cast<unsigned long long>(hash()));
  return buf;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch = batch;
  t.adam.lr = lr;
  t.adam.weight_decay = weight_decay;
  t.margin = margin;
  t.rho = rho;
  t.rho_neg = rho_neg;
  t.aug_flip = aug_flip;
  t.aug_jitter = aug_jitter;
  t.jitter_sigma = jitter_sigma;
  t.seed = model.seed;
  return t;
}

WorldConfig RunConfig::world_config() const {
  WorldConfig w;
  w.seed = model.seed;
  w.n_places = n_places;
  w.revisit_factor = revisits;
  w.place_spacing = place_spacing;
  w.revisit_jitter = revisit_jitter;
  w.points_per_frame = points_per_frame;
  w.img_h = img_h;
  w.img_w = img_w;
  return w;
}

SweepConfig RunConfig::sweep_config() const {
  SweepConfig s;
  s.alphas = alphas;
  s.rot_errors_deg = rot_errors_deg;
  s.trans_errors = trans_errors;
  s.tau = tau;
  s.seed = model.seed;
  return s;
}

}  // namespace prf
