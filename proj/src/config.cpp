#include "mcg/config.hpp"

#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

namespace mcg {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError("config: " + msg); }

double as_number(const json& v, const std::string& key) {
    if (!v.is_number()) fail("`" + key + "` must be a number");
    return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) fail("`" + key + "` must be an integer");
    return v.get<int>();
}

bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) fail("`" + key + "` must be a boolean");
    return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) fail("`" + key + "` must be a string");
    return v.get<std::string>();
}

void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

}  // namespace

NoiseSchedule RunConfig::make_schedule() const {
    return NoiseSchedule::make(train_steps, beta_start, beta_end, guidance.total_steps,
                               deterministic_sampler);
}

void RunConfig::validate() const {
    require(guidance.alpha >= 0.0, "`alpha` must be >= 0");
    require(guidance.alpha1 >= 0.0, "`alpha1` must be >= 0");
    require(guidance.alpha2 >= 0.0, "`alpha2` must be >= 0");
    require(guidance.lambda_end > 0.0, "`lambda_end` must be > 0");
    require(guidance.lambda_start >= guidance.lambda_end,
            "`lambda_start` must be >= `lambda_end`");
    require(guidance.total_steps >= 2, "`total_steps` must be >= 2");
    require(guidance.guided_steps >= 0, "`guided_steps` must be >= 0");
    require(guidance.guided_steps <= guidance.total_steps,
            "`guided_steps` must be <= `total_steps`");
    require(guidance.grad_steps_per_t >= 1, "`grad_steps_per_t` must be >= 1");
    require(guidance.eps_div > 0.0, "`eps_div` must be > 0");
    require(guidance.eps_log > 0.0 && guidance.eps_log < 0.5,
            "`eps_log` must lie in (0, 0.5)");
    require(guidance.smoothing.kernel_size >= 1 && guidance.smoothing.kernel_size % 2 == 1,
            "`smoothing_kernel` must be odd and >= 1");
    require(guidance.smoothing.sigma > 0.0, "`smoothing_sigma` must be > 0");
    require(guidance.mask_proposal.theta1 >= 0.0 && guidance.mask_proposal.theta1 <= 1.0,
            "`mask_theta1` must lie in [0, 1]");
    require(guidance.mask_proposal.theta2 >= 0.0 && guidance.mask_proposal.theta2 <= 1.0,
            "`mask_theta2` must lie in [0, 1]");
    require(guidance.mask_proposal.dilation_radius >= 0,
            "`mask_dilation_radius` must be >= 0");
    require(train_steps >= guidance.total_steps,
            "`train_steps` must be >= `total_steps`");
    require(base_steps >= 0, "`base_steps` must be >= 0");
    require(beta_start > 0.0, "`beta_start` must be > 0");
    require(beta_end >= beta_start && beta_end < 1.0,
            "`beta_end` must lie in [`beta_start`, 1)");
    require(w_global >= 0.0, "`w_global` must be >= 0");
    require(w_concept >= 0.0, "`w_concept` must be >= 0");
    require(compgen_w_global >= 0.0, "`compgen_w_global` must be >= 0");
    require(compgen_w_concept >= 0.0, "`compgen_w_concept` must be >= 0");
    require(height >= 1, "`height` must be >= 1");
    require(width >= 1, "`width` must be >= 1");
    require(snapshot_step >= -1 && snapshot_step < guidance.total_steps,
            "`snapshot_step` must lie in [-1, `total_steps`)");
    require(latent_snapshot_every >= 0, "`latent_snapshot_every` must be >= 0");
    require(!seeds.empty(), "`seeds` must not be empty");
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    bool blank = true;
    for (char c : text)
        if (std::isspace(static_cast<unsigned char>(c)) == 0) {
            blank = false;
            break;
        }
    if (!blank) {
        json doc;
        try {
            doc = json::parse(text);
        } catch (const json::parse_error& e) {
            fail(std::string("malformed document: ") + e.what());
        }
        if (!doc.is_object()) fail("document must be an object");

        using Handler = std::function<void(const json&, const std::string&)>;
        const std::map<std::string, Handler> handlers = {
            {"alpha", [&](const json& v, const std::string& k) { cfg.guidance.alpha = as_number(v, k); }},
            {"alpha1", [&](const json& v, const std::string& k) { cfg.guidance.alpha1 = as_number(v, k); }},
            {"alpha2", [&](const json& v, const std::string& k) { cfg.guidance.alpha2 = as_number(v, k); }},
            {"lambda_start", [&](const json& v, const std::string& k) { cfg.guidance.lambda_start = as_number(v, k); }},
            {"lambda_end", [&](const json& v, const std::string& k) { cfg.guidance.lambda_end = as_number(v, k); }},
            {"guided_steps", [&](const json& v, const std::string& k) { cfg.guidance.guided_steps = as_int(v, k); }},
            {"total_steps", [&](const json& v, const std::string& k) { cfg.guidance.total_steps = as_int(v, k); }},
            {"grad_steps_per_t", [&](const json& v, const std::string& k) { cfg.guidance.grad_steps_per_t = as_int(v, k); }},
            {"eps_div", [&](const json& v, const std::string& k) { cfg.guidance.eps_div = as_number(v, k); }},
            {"eps_log", [&](const json& v, const std::string& k) { cfg.guidance.eps_log = as_number(v, k); }},
            {"smoothing_kernel", [&](const json& v, const std::string& k) { cfg.guidance.smoothing.kernel_size = as_int(v, k); }},
            {"smoothing_sigma", [&](const json& v, const std::string& k) { cfg.guidance.smoothing.sigma = as_number(v, k); }},
            {"mask_theta1", [&](const json& v, const std::string& k) { cfg.guidance.mask_proposal.theta1 = as_number(v, k); }},
            {"mask_theta2", [&](const json& v, const std::string& k) { cfg.guidance.mask_proposal.theta2 = as_number(v, k); }},
            {"mask_dilation_radius", [&](const json& v, const std::string& k) { cfg.guidance.mask_proposal.dilation_radius = as_int(v, k); }},
            {"mask_unit_range_normalize", [&](const json& v, const std::string& k) { cfg.guidance.mask_proposal.unit_range_normalize = as_bool(v, k); }},
            {"per_pixel_overlap", [&](const json& v, const std::string& k) { cfg.guidance.per_pixel_overlap = as_bool(v, k); }},
            {"use_intra", [&](const json& v, const std::string& k) { cfg.guidance.use_intra = as_bool(v, k); }},
            {"use_inter", [&](const json& v, const std::string& k) { cfg.guidance.use_inter = as_bool(v, k); }},
            {"smooth_focus_maps", [&](const json& v, const std::string& k) { cfg.guidance.smooth_focus_maps = as_bool(v, k); }},
            {"train_steps", [&](const json& v, const std::string& k) { cfg.train_steps = as_int(v, k); }},
            {"beta_start", [&](const json& v, const std::string& k) { cfg.beta_start = as_number(v, k); }},
            {"beta_end", [&](const json& v, const std::string& k) { cfg.beta_end = as_number(v, k); }},
            {"deterministic_sampler", [&](const json& v, const std::string& k) { cfg.deterministic_sampler = as_bool(v, k); }},
            {"base_steps", [&](const json& v, const std::string& k) { cfg.base_steps = as_int(v, k); }},
            {"w_global", [&](const json& v, const std::string& k) { cfg.w_global = as_number(v, k); }},
            {"w_concept", [&](const json& v, const std::string& k) { cfg.w_concept = as_number(v, k); }},
            {"compgen_w_global", [&](const json& v, const std::string& k) { cfg.compgen_w_global = as_number(v, k); }},
            {"compgen_w_concept", [&](const json& v, const std::string& k) { cfg.compgen_w_concept = as_number(v, k); }},
            {"height", [&](const json& v, const std::string& k) { cfg.height = as_int(v, k); }},
            {"width", [&](const json& v, const std::string& k) { cfg.width = as_int(v, k); }},
            {"refine_masks", [&](const json& v, const std::string& k) { cfg.refine_masks = as_bool(v, k); }},
            {"z_space_merge", [&](const json& v, const std::string& k) { cfg.z_space_merge = as_bool(v, k); }},
            {"snapshot_step", [&](const json& v, const std::string& k) { cfg.snapshot_step = as_int(v, k); }},
            {"latent_snapshot_every", [&](const json& v, const std::string& k) { cfg.latent_snapshot_every = as_int(v, k); }},
            {"output_dir", [&](const json& v, const std::string& k) { cfg.output_dir = as_string(v, k); }},
            {"adapters",
             [&](const json& v, const std::string& k) {
                 if (!v.is_array()) fail("`" + k + "` must be an array of strings");
                 cfg.adapters.clear();
                 for (const json& e : v) cfg.adapters.push_back(as_string(e, k));
             }},
            {"seeds",
             [&](const json& v, const std::string& k) {
                 if (!v.is_array()) fail("`" + k + "` must be an array of integers");
                 cfg.seeds.clear();
                 for (const json& e : v) {
                     if (!e.is_number_integer() || e.get<std::int64_t>() < 0)
                         fail("`" + k + "` entries must be nonnegative integers");
                     cfg.seeds.push_back(e.get<std::uint64_t>());
                 }
             }},
        };

        for (const auto& [key, value] : doc.items()) {
            auto it = handlers.find(key);
            if (it == handlers.end()) fail("unknown key `" + key + "`");
            it->second(value, key);
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string dump_run_config(const RunConfig& cfg) {
    ordered_json doc;
    doc["alpha"] = cfg.guidance.alpha;
    doc["alpha1"] = cfg.guidance.alpha1;
    doc["alpha2"] = cfg.guidance.alpha2;
    doc["lambda_start"] = cfg.guidance.lambda_start;
    doc["lambda_end"] = cfg.guidance.lambda_end;
    doc["guided_steps"] = cfg.guidance.guided_steps;
    doc["total_steps"] = cfg.guidance.total_steps;
    doc["grad_steps_per_t"] = cfg.guidance.grad_steps_per_t;
    doc["eps_div"] = cfg.guidance.eps_div;
    doc["eps_log"] = cfg.guidance.eps_log;
    doc["smoothing_kernel"] = cfg.guidance.smoothing.kernel_size;
    doc["smoothing_sigma"] = cfg.guidance.smoothing.sigma;
    doc["mask_theta1"] = cfg.guidance.mask_proposal.theta1;
    doc["mask_theta2"] = cfg.guidance.mask_proposal.theta2;
    doc["mask_dilation_radius"] = cfg.guidance.mask_proposal.dilation_radius;
    doc["mask_unit_range_normalize"] = cfg.guidance.mask_proposal.unit_range_normalize;
    doc["per_pixel_overlap"] = cfg.guidance.per_pixel_overlap;
    doc["use_intra"] = cfg.guidance.use_intra;
    doc["use_inter"] = cfg.guidance.use_inter;
    doc["smooth_focus_maps"] = cfg.guidance.smooth_focus_maps;
    doc["train_steps"] = cfg.train_steps;
    doc["beta_start"] = cfg.beta_start;
    doc["beta_end"] = cfg.beta_end;
    doc["deterministic_sampler"] = cfg.deterministic_sampler;
    doc["base_steps"] = cfg.base_steps;
    doc["w_global"] = cfg.w_global;
    doc["w_concept"] = cfg.w_concept;
    doc["compgen_w_global"] = cfg.compgen_w_global;
    doc["compgen_w_concept"] = cfg.compgen_w_concept;
    doc["height"] = cfg.height;
    doc["width"] = cfg.width;
    doc["refine_masks"] = cfg.refine_masks;
    doc["z_space_merge"] = cfg.z_space_merge;
    doc["snapshot_step"] = cfg.snapshot_step;
    doc["latent_snapshot_every"] = cfg.latent_snapshot_every;
    doc["adapters"] = cfg.adapters;
    doc["seeds"] = cfg.seeds;
    doc["output_dir"] = cfg.output_dir;
    return doc.dump(2) + "\n";
}

}  // namespace mcg
