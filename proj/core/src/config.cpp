#include "msholo/config.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "msholo/error.hpp"

namespace msholo {

using json = nlohmann::json;

namespace {

constexpr double kRadPerMm = 1e3;

json vec_json(Vec2 v, double unit) { return json::array({v.x / unit, v.y / unit}); }

Vec2 vec_from(const json& j, double unit, const std::string& key) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("'" + key + "' must be a two-element array");
  return {j[0].get<double>() * unit, j[1].get<double>() * unit};
}

std::vector<double> scaled_list(const std::vector<double>& v, double unit) {
  std::vector<double> out;
  for (double x : v) out.push_back(x / unit);
  return out;
}

json grid_json(const GridSpec& g) {
  return {{"rows", g.rows},
          {"cols", g.cols},
          {"spacing_rad_per_mm", g.spacing / kRadPerMm},
          {"offset_rad_per_mm", vec_json(g.offset, kRadPerMm)}};
}

GridSpec grid_from(const json& j) {
  GridSpec g;
  g.rows = j.at("rows").get<int>();
  g.cols = j.at("cols").get<int>();
  g.spacing = j.at("spacing_rad_per_mm").get<double>() * kRadPerMm;
  g.offset = vec_from(j.at("offset_rad_per_mm"), kRadPerMm, "offset_rad_per_mm");
  return g;
}

const char* band_name(BandLimit b) { return b == BandLimit::matsushima ? "matsushima" : "none"; }

BandLimit parse_band(const std::string& s) {
  if (s == "none") return BandLimit::none;
  if (s == "matsushima") return BandLimit::matsushima;
  throw ConfigError("unknown band limit '" + s + "'");
}

const char* init_name(InitKind k) { return k == InitKind::constant ? "constant" : "uniform_random"; }
const char* scale_name(LossScale s) { return s == LossScale::fixed ? "fixed" : "least_squares"; }

json to_tree(const AppConfig& c) {
  json t;
  t["seed"] = c.seed;
  t["threads"] = c.threads;
  t["precision"] = precision_name(c.optimize.precision);
  const SystemConfig& s = c.system;
  std::vector<double> wl;
  for (double w : s.wavelengths) wl.push_back(w / 1e-9);
  t["system"] = {{"pitch_um", s.pitch / 1e-6},
                 {"gap_mm", s.gap / 1e-3},
                 {"wavelengths_nm", wl},
                 {"planes_mm", scaled_list(s.planes, 1e-3)},
                 {"upsample", s.upsample},
                 {"eyepiece_focal_mm", s.eyepiece_focal / 1e-3},
                 {"eyebox_plane_mm", s.eyebox_plane / 1e-3},
                 {"band_limit", band_name(s.band_limit)}};
  t["slm"] = {{"rows", c.slm.rows},
              {"cols", c.slm.cols},
              {"first", modulation_name(c.first)},
              {"second", c.second ? json(modulation_name(*c.second)) : json(nullptr)}};
  json tilts = json::array();
  for (const Vec2& v : c.sources.tilts) tilts.push_back(vec_json(v, kRadPerMm));
  t["sources"] = {{"grid", grid_json(c.sources.grid)}, {"tilts_rad_per_mm", tilts}, {"intensities", c.sources.intensities}};
  t["scene"] = {{"path", c.scene.path.string()}, {"blur_px_per_mm", c.scene.blur_rate}, {"seed", c.scene.seed}};
  const OptimizeSpec& o = c.optimize;
  t["optimize"] = {{"iterations", o.iterations},
                   {"lr", o.adam.lr},
                   {"beta1", o.adam.beta1},
                   {"beta2", o.adam.beta2},
                   {"eps", o.adam.eps},
                   {"init", init_name(o.init)},
                   {"loss_planes", o.loss_planes},
                   {"plane_weights", o.plane_weights},
                   {"frames", o.frames},
                   {"loss_scale", scale_name(o.scale)},
                   {"pupil",
                    {{"enabled", o.pupil.enabled},
                     {"radius_mm", o.pupil.radius / 1e-3},
                     {"center_range_mm", o.pupil.center_range / 1e-3},
                     {"count", o.pupil.count}}}};
  const SweepSpec& w = c.sweep;
  t["sweep"] = {{"spacings_rad_per_mm", scaled_list(w.spacings, kRadPerMm)},
                {"counts", w.counts},
                {"count_spacing_rad_per_mm", w.count_spacing / kRadPerMm},
                {"grating_period", w.grating_period},
                {"contrast_window", w.contrast_window},
                {"grating_foci", w.grating_foci}};
  t["experiments"] = {{"tm_frames", c.experiments.tm_frames},
                      {"tm_planes", c.experiments.tm_planes},
                      {"pupil_edge_mm", c.experiments.pupil_edge / 1e-3}};
  const CalibrationSettings& k = c.calibration;
  t["calibration"] = {
      {"slm_size", k.slm_size},
      {"grid", grid_json(k.grid)},
      {"perturbation", perturbation_name(k.perturbation)},
      {"model",
       {{"pupil_nodes_rows", k.model.pupil_nodes_rows},
        {"pupil_nodes_cols", k.model.pupil_nodes_cols},
        {"pupil_freq_size", k.model.pupil_freq_size},
        {"tile_rows", k.model.tile_rows},
        {"tile_cols", k.model.tile_cols},
        {"warp_lattice", k.model.warp_lattice}}},
      {"dataset",
       {{"records_per_config", k.dataset.records_per_config},
        {"blur_sigmas", k.dataset.blur_sigmas},
        {"planes_mm", scaled_list(k.dataset.planes, 1e-3)},
        {"configs", k.dataset.configs},
        {"noise_std", k.dataset.noise_std},
        {"seed", k.dataset.seed}}},
      {"fit",
       {{"iterations", std::vector<int>(std::begin(k.fit.iterations), std::end(k.fit.iterations))},
        {"lr_lut", k.fit.lr_lut},
        {"lr_fringing", k.fit.lr_fringing},
        {"lr_pupil", k.fit.lr_pupil},
        {"lr_warp", k.fit.lr_warp},
        {"lr_source_position", k.fit.lr_source_position},
        {"lr_source_intensity", k.fit.lr_source_intensity},
        {"decay", k.fit.decay},
        {"patch_mode", k.fit.patch_mode},
        {"seed", k.fit.seed}}},
      {"citl", {{"iterations", k.citl.iterations}, {"lr", k.citl.adam.lr}, {"cycle_planes", k.citl.cycle_planes}}}};
  return t;
}

AppConfig from_tree(const json& t, const std::filesystem::path& base) {
  AppConfig c;
  c.base_dir = base;
  c.seed = t.at("seed").get<std::uint64_t>();
  c.threads = t.at("threads").get<int>();
  const json& s = t.at("system");
  c.system.pitch = s.at("pitch_um").get<double>() * 1e-6;
  c.system.gap = s.at("gap_mm").get<double>() * 1e-3;
  c.system.wavelengths.clear();
  for (double w : s.at("wavelengths_nm").get<std::vector<double>>()) c.system.wavelengths.push_back(w * 1e-9);
  c.system.planes.clear();
  for (double z : s.at("planes_mm").get<std::vector<double>>()) c.system.planes.push_back(z * 1e-3);
  c.system.upsample = s.at("upsample").get<int>();
  c.system.eyepiece_focal = s.at("eyepiece_focal_mm").get<double>() * 1e-3;
  c.system.eyebox_plane = s.at("eyebox_plane_mm").get<double>() * 1e-3;
  c.system.band_limit = parse_band(s.at("band_limit").get<std::string>());
  const json& slm = t.at("slm");
  c.slm = {slm.at("rows").get<int>(), slm.at("cols").get<int>()};
  c.first = parse_modulation(slm.at("first").get<std::string>());
  if (slm.at("second").is_null()) {
    c.second.reset();
  } else {
    c.second = parse_modulation(slm.at("second").get<std::string>());
  }
  const json& src = t.at("sources");
  c.sources.grid = grid_from(src.at("grid"));
  c.sources.tilts.clear();
  for (const json& v : src.at("tilts_rad_per_mm")) c.sources.tilts.push_back(vec_from(v, kRadPerMm, "tilts_rad_per_mm"));
  c.sources.intensities = src.at("intensities").get<std::vector<double>>();
  const json& sc = t.at("scene");
  c.scene.path = sc.at("path").get<std::string>();
  c.scene.blur_rate = sc.at("blur_px_per_mm").get<double>();
  c.scene.seed = sc.at("seed").get<std::uint64_t>();
  const json& o = t.at("optimize");
  OptimizeSpec& os = c.optimize;
  os.iterations = o.at("iterations").get<int>();
  os.adam.lr = o.at("lr").get<double>();
  os.adam.beta1 = o.at("beta1").get<double>();
  os.adam.beta2 = o.at("beta2").get<double>();
  os.adam.eps = o.at("eps").get<double>();
  os.init = parse_init(o.at("init").get<std::string>());
  os.loss_planes = o.at("loss_planes").get<std::vector<int>>();
  os.plane_weights = o.at("plane_weights").get<std::vector<double>>();
  os.frames = o.at("frames").get<int>();
  os.scale = parse_loss_scale(o.at("loss_scale").get<std::string>());
  const json& p = o.at("pupil");
  os.pupil.enabled = p.at("enabled").get<bool>();
  os.pupil.radius = p.at("radius_mm").get<double>() * 1e-3;
  os.pupil.center_range = p.at("center_range_mm").get<double>() * 1e-3;
  os.pupil.count = p.at("count").get<int>();
  os.seed = c.seed;
  os.precision = parse_precision(t.at("precision").get<std::string>());
  const json& w = t.at("sweep");
  c.sweep.spacings.clear();
  for (double v : w.at("spacings_rad_per_mm").get<std::vector<double>>()) c.sweep.spacings.push_back(v * kRadPerMm);
  c.sweep.counts = w.at("counts").get<std::vector<int>>();
  c.sweep.count_spacing = w.at("count_spacing_rad_per_mm").get<double>() * kRadPerMm;
  c.sweep.grating_period = w.at("grating_period").get<int>();
  c.sweep.contrast_window = w.at("contrast_window").get<int>();
  c.sweep.grating_foci = w.at("grating_foci").get<int>();
  const json& e = t.at("experiments");
  c.experiments.tm_frames = e.at("tm_frames").get<int>();
  c.experiments.tm_planes = e.at("tm_planes").get<int>();
  c.experiments.pupil_edge = e.at("pupil_edge_mm").get<double>() * 1e-3;
  const json& k = t.at("calibration");
  CalibrationSettings& ks = c.calibration;
  ks.slm_size = k.at("slm_size").get<int>();
  ks.grid = grid_from(k.at("grid"));
  ks.perturbation = parse_perturbation(k.at("perturbation").get<std::string>());
  const json& m = k.at("model");
  ks.model.pupil_nodes_rows = m.at("pupil_nodes_rows").get<int>();
  ks.model.pupil_nodes_cols = m.at("pupil_nodes_cols").get<int>();
  ks.model.pupil_freq_size = m.at("pupil_freq_size").get<int>();
  ks.model.tile_rows = m.at("tile_rows").get<int>();
  ks.model.tile_cols = m.at("tile_cols").get<int>();
  ks.model.warp_lattice = m.at("warp_lattice").get<int>();
  const json& d = k.at("dataset");
  ks.dataset.records_per_config = d.at("records_per_config").get<int>();
  ks.dataset.blur_sigmas = d.at("blur_sigmas").get<std::vector<double>>();
  ks.dataset.planes.clear();
  for (double z : d.at("planes_mm").get<std::vector<double>>()) ks.dataset.planes.push_back(z * 1e-3);
  ks.dataset.configs = d.at("configs").get<std::vector<int>>();
  ks.dataset.noise_std = d.at("noise_std").get<double>();
  ks.dataset.seed = d.at("seed").get<std::uint64_t>();
  const json& f = k.at("fit");
  const auto iters = f.at("iterations").get<std::vector<int>>();
  if (iters.size() != 4) throw ConfigError("calibration.fit.iterations needs four stage counts");
  std::copy(iters.begin(), iters.end(), ks.fit.iterations);
  ks.fit.lr_lut = f.at("lr_lut").get<double>();
  ks.fit.lr_fringing = f.at("lr_fringing").get<double>();
  ks.fit.lr_pupil = f.at("lr_pupil").get<double>();
  ks.fit.lr_warp = f.at("lr_warp").get<double>();
  ks.fit.lr_source_position = f.at("lr_source_position").get<double>();
  ks.fit.lr_source_intensity = f.at("lr_source_intensity").get<double>();
  ks.fit.decay = f.at("decay").get<double>();
  ks.fit.patch_mode = f.at("patch_mode").get<bool>();
  ks.fit.seed = f.at("seed").get<std::uint64_t>();
  const json& ct = k.at("citl");
  ks.citl.iterations = ct.at("iterations").get<int>();
  ks.citl.adam.lr = ct.at("lr").get<double>();
  ks.citl.cycle_planes = ct.at("cycle_planes").get<bool>();
  return c;
}

// Overlays `patch` onto `base`; every key in the patch must already exist.
void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("'" + (where.empty() ? std::string("<root>") : where) + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void apply_override(json& tree, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' is not of the form key=value");
  const std::string path = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json patch = value;
  std::size_t end = path.size();
  while (true) {
    const auto dot = path.rfind('.', end - 1);
    const std::string key = path.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    if (key.empty()) throw ConfigError("override '" + text + "' has an empty key");
    patch = json{{key, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  merge_strict(tree, patch, "");
}

AppConfig build(json tree, const std::string& user_text, const std::filesystem::path& base,
                const std::vector<std::string>& overrides) {
  try {
    if (!user_text.empty()) {
      json user = json::parse(user_text);
      merge_strict(tree, user, "");
    }
    for (const auto& o : overrides) apply_override(tree, o);
    AppConfig c = from_tree(tree, base);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

}  // namespace

SourceArray SourceSpec::build() const {
  if (tilts.empty()) {
    if (!intensities.empty()) throw ConfigError("source intensities need explicit tilts");
    return make_grid(grid);
  }
  std::vector<double> w = intensities;
  if (w.empty()) w.assign(tilts.size(), 1.0 / static_cast<double>(tilts.size()));
  if (w.size() != tilts.size()) throw ConfigError("source intensities and tilts differ in length");
  return SourceArray(tilts, w);
}

void AppConfig::validate() const {
  system.validate(second.has_value());
  if (slm.rows < 1 || slm.cols < 1) throw ConfigError("SLM grid must be non-empty");
  if (threads < 0) throw ConfigError("threads must be >= 0");
  sources.build().check_paraxial(system.wavelength());
  if (!(scene.blur_rate >= 0.0)) throw ConfigError("scene blur rate must be nonnegative");
  optimize.validate(system.planes.size());
  if (sweep.spacings.empty()) throw ConfigError("sweep spacings must not be empty");
  if (sweep.counts.empty()) throw ConfigError("sweep counts must not be empty");
  for (double s : sweep.spacings) {
    if (!(s >= 0.0)) throw ConfigError("sweep spacings must be nonnegative");
  }
  for (int n : sweep.counts) {
    const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    if (n < 1 || r * r != n) throw ConfigError("sweep counts must be square numbers");
  }
  if (sweep.grating_period < 2) throw ConfigError("grating period must be >= 2 pixels");
  if (sweep.contrast_window < sweep.grating_period) throw ConfigError("contrast window smaller than one period");
  if (sweep.grating_foci < 1) throw ConfigError("grating_foci must be >= 1");
  if (experiments.tm_frames < 1) throw ConfigError("tm_frames must be >= 1");
  if (experiments.tm_planes < 1) throw ConfigError("tm_planes must be >= 1");
  if (!(experiments.pupil_edge >= 0.0)) throw ConfigError("pupil_edge must be nonnegative");
  if (calibration.slm_size < 4) throw ConfigError("calibration grid must be at least 4 pixels");
  if (calibration.citl.iterations < 0) throw ConfigError("citl iterations must be >= 0");
}

AppConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir,
                       const std::vector<std::string>& overrides) {
  return build(to_tree(AppConfig{}), json_text, base_dir, overrides);
}

AppConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) text = "{}";
  return parse_config(text, path.parent_path(), overrides);
}

AppConfig default_config(const std::vector<std::string>& overrides) {
  return build(to_tree(AppConfig{}), "", {}, overrides);
}

std::string config_to_json(const AppConfig& config) { return to_tree(config).dump(2); }

std::string config_hash(const AppConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_tree(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

LayeredScene build_scene(const AppConfig& config) {
  const SystemConfig& s = config.system;
  if (config.scene.path.empty()) {
    const auto [lo, hi] = std::minmax_element(s.planes.begin(), s.planes.end());
    // A single plane gets layers 25% either side of it.
    if (*hi - *lo < 1e-9) return builtin_scene(config.slm, s.pitch, 1.25 * *hi, 0.75 * *lo, config.scene.seed);
    return builtin_scene(config.slm, s.pitch, *hi, *lo, config.scene.seed);
  }
  std::filesystem::path p = config.scene.path;
  if (p.is_relative()) p = config.base_dir / p;
  if (!std::filesystem::exists(p)) throw ConfigError("scene file not found: " + p.string());
  return load_scene(p, config.slm, s.pitch);
}

FocalStackTarget build_target(const AppConfig& config) {
  return render_focal_stack(build_scene(config), config.system.planes, config.scene.blur_rate);
}

}  // namespace msholo
