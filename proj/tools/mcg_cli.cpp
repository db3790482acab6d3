#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mcg/config.hpp"
#include "mcg/grounding.hpp"
#include "mcg/harness.hpp"
#include "mcg/io.hpp"

namespace {

using namespace mcg;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitDegenerate = 4;

constexpr double kGradcheckModelTol = 1e-4;
constexpr double kGradcheckOracleTol = 1e-6;

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::uint64_t world_seed = 7;
    bool dry_run = false;
    bool strict = false;
    int jobs = 0;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "JSON config file");
    sub->add_option("--set", c.overrides, "override a config key, key=value")->take_all();
    sub->add_option("--out", c.out_dir, "output directory (overrides config)");
    sub->add_option("--seed", c.seed, "run seed (replaces the config seed list)");
    sub->add_option("--world-seed", c.world_seed, "seed for the shared synthetic world");
    sub->add_flag("--dry-run", c.dry_run, "validate and print the plan, compute nothing");
    sub->add_flag("--strict", c.strict, "treat degenerate diagnostics as failure");
    sub->add_option("--jobs", c.jobs, "worker threads, 0 = all cores");
}

RunConfig resolve_config(const Common& c) {
    std::string text;
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw ConfigError("config: cannot open " + c.config_path);
        std::ostringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    json doc = json::object();
    bool blank = text.find_first_not_of(" \t\r\n") == std::string::npos;
    if (!blank) {
        try {
            doc = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config: malformed document: ") + e.what());
        }
        if (!doc.is_object()) throw ConfigError("config: document must be an object");
    }
    for (const std::string& kv : c.overrides) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("config: --set expects key=value, got `" + kv + "`");
        std::string key = kv.substr(0, eq);
        std::string raw = kv.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;  // unquoted strings pass through
        }
        doc[key] = value;
    }
    RunConfig cfg = parse_run_config(doc.dump());
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
    return cfg;
}

fs::path ensure_out(const RunConfig& cfg) {
    fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    return dir;
}

World make_world(const RunConfig& cfg, std::uint64_t world_seed) {
    WorldSpec spec = default_world_spec();
    spec.height = cfg.height;
    spec.width = cfg.width;
    spec.train_grid = cfg.train_steps;
    spec.beta_start = cfg.beta_start;
    spec.beta_end = cfg.beta_end;
    spec.inference_steps = cfg.guidance.total_steps;
    spec.deterministic_sampler = cfg.deterministic_sampler;
    if (cfg.base_steps > 0) spec.base_train.steps = cfg.base_steps;
    return build_world(spec, world_seed);
}

RunOptions make_run_options(const RunConfig& cfg, std::uint64_t seed) {
    RunOptions opt;
    opt.height = cfg.height;
    opt.width = cfg.width;
    opt.guidance = cfg.guidance;
    opt.schedule = cfg.make_schedule();
    opt.refine_masks = cfg.refine_masks;
    opt.z_space_merge = cfg.z_space_merge;
    opt.snapshot_step = cfg.snapshot_step;
    opt.latent_snapshot_every = cfg.latent_snapshot_every;
    opt.seed = seed;
    return opt;
}

const ConceptSpec& concept_by_name(const World& world, const std::string& name,
                                   const char* flag) {
    for (const ConceptSpec& s : world.spec.concepts)
        if (s.name == name) return s;
    throw ConfigError(std::string("config: `") + flag + "` names no known concept: " + name);
}

const ConceptSpec& concept_by_trigger(const World& world, const std::string& trigger,
                                      const std::string& source) {
    for (const ConceptSpec& s : world.spec.concepts)
        if (s.trigger == trigger) return s;
    throw ConfigError("config: " + source + " carries trigger `" + trigger +
                      "` unknown to this world");
}

AdapterKind kind_from_flag(const std::string& name) {
    try {
        return adapter_kind_from_name(name);
    } catch (const std::exception&) {
        throw ConfigError("config: `--kind` must be one of embedding-offset, low-rank, "
                          "full-delta, got `" + name + "`");
    }
}

struct ComposePlan {
    std::vector<LoadedAdapter> loaded;
    std::vector<ConceptSpec> specs;
    std::vector<int> uncond;
    std::vector<SamplerBranch> branches;  // global first, then one per concept
};

ComposePlan assemble_concepts(const World& world, const RunConfig& cfg,
                              const std::vector<std::string>& paths) {
    if (paths.empty())
        throw ConfigError("config: `adapters` must list at least one checkpoint");
    ComposePlan plan;
    std::uint64_t fp = params_fingerprint(world.base);
    for (const std::string& path : paths) {
        LoadedAdapter la = load_adapter(path);
        if (la.world_fingerprint != fp)
            throw ConfigError("config: checkpoint " + path +
                              " was trained against a different base model");
        const ConceptSpec& spec = concept_by_trigger(world, la.adapter.trigger, path);
        if (la.adapter.trigger_id != world.vocab.id_of(spec.trigger))
            throw ConfigError("config: checkpoint " + path + " has a stale trigger id");
        plan.loaded.push_back(std::move(la));
        plan.specs.push_back(spec);
    }
    plan.uncond = uncond_prompt(world.vocab);
    SamplerBranch global;
    global.tokens = global_prompt(world.vocab, plan.specs);
    global.weight = cfg.w_global;
    plan.branches.push_back(global);
    for (std::size_t i = 0; i < plan.specs.size(); ++i) {
        SubPrompt p = concept_prompt(world.vocab, plan.specs, i);
        SamplerBranch b;
        b.tokens = p.tokens;
        b.triggers = p.triggers;
        b.adapter = &plan.loaded[i].adapter;
        b.weight = cfg.w_concept;
        plan.branches.push_back(b);
    }
    return plan;
}

void run_in_parallel(int n, int jobs, const std::function<void(int)>& fn) {
    if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

bool trace_degenerate(const RunTrace& trace) {
    for (const StepRecord& rec : trace.steps) {
        if (rec.mask_degenerate) return true;
        if (rec.post_valid && rec.post.inter_degenerate) return true;
        for (const LossBreakdown& b : rec.stage1)
            if (b.inter_degenerate) return true;
    }
    return false;
}

Tensor map_to_tensor(const Map2D& m) {
    Tensor t({static_cast<std::size_t>(m.h), static_cast<std::size_t>(m.w)});
    for (std::size_t i = 0; i < m.v.size(); ++i) t[i] = m.v[i];
    return t;
}

Map2D tensor_to_map(const Tensor& t, const std::string& source) {
    if (t.rank() != 2)
        throw ConfigError("config: " + source + " must hold a rank-2 map");
    Map2D m(static_cast<int>(t.extent(0)), static_cast<int>(t.extent(1)));
    for (std::size_t i = 0; i < t.numel(); ++i) m.v[i] = t[i];
    return m;
}

void print_plan(const RunConfig& cfg, const std::string& action) {
    std::cout << "resolved config:\n" << dump_run_config(cfg);
    std::cout << "plan: " << action << "\n";
}

int cmd_train_concept(const Common& c, const std::string& concept_name,
                      const std::string& kind_name, int steps, int batch, double lr,
                      double gamma1, double gamma2, int dataset_size,
                      const std::string& dataset_dir, const std::string& make_dataset_dir,
                      std::string adapter_out) {
    RunConfig cfg = resolve_config(c);
    AdapterKind kind = kind_from_flag(kind_name);
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = batch;
    tc.lr = lr;
    tc.gamma1 = gamma1;
    tc.gamma2 = gamma2;
    tc.eps_div = cfg.guidance.eps_div;
    tc.eps_log = cfg.guidance.eps_log;
    tc.validate();
    if (dataset_size < 1) throw ConfigError("config: `--dataset-size` must be >= 1");
    if (!dataset_dir.empty() && !make_dataset_dir.empty())
        throw ConfigError("config: `--dataset` and `--make-dataset` are mutually exclusive");
    if (c.dry_run) {
        print_plan(cfg, "train one concept adapter (" + concept_name + ", " +
                            adapter_kind_name(kind) + ", " + std::to_string(steps) + " steps)");
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    if (adapter_out.empty()) adapter_out = (out / "adapter.json").string();

    World world = make_world(cfg, c.world_seed);
    const ConceptSpec& spec = concept_by_name(world, concept_name, "--concept");
    std::uint64_t seed = cfg.seeds.front();

    std::vector<GroundedSample> dataset;
    if (!dataset_dir.empty()) {
        dataset = load_dataset(dataset_dir, world.vocab);
        bool has_trigger = false;
        for (int id : dataset.front().tokens)
            if (id == world.vocab.id_of(spec.trigger)) has_trigger = true;
        if (!has_trigger)
            throw ConfigError("config: dataset " + dataset_dir + " does not caption trigger `" +
                              spec.trigger + "`");
    } else {
        Rng rng(seed);
        dataset = build_scene_dataset(spec, world.spec.height, world.spec.width, dataset_size,
                                      world.vocab, rng);
        if (!make_dataset_dir.empty())
            save_dataset(make_dataset_dir, dataset, world.vocab, spec.name, spec.trigger);
    }

    TrainResult result = train_concept(world.base, dataset, kind, spec.trigger,
                                       world.vocab.id_of(spec.trigger), tc, world.schedule,
                                       seed + 1);
    save_adapter(adapter_out, result.adapter, params_fingerprint(world.base));
    save_loss_curve((out / "loss_curve.jsonl").string(), result.stats);

    // Trigger attention map on the first sample at a fixed mid-grid noise level.
    {
        const GroundedSample& s = dataset.front();
        Rng rng(seed + 2);
        int t = world.schedule.train_steps / 2;
        double ab = world.schedule.alpha_bar[static_cast<std::size_t>(t)];
        Tensor noise = rng.gaussian_tensor(s.x0.shape());
        Tensor zt = Tensor::zeros_like(s.x0);
        for (std::size_t i = 0; i < zt.numel(); ++i)
            zt[i] = std::sqrt(ab) * s.x0[i] + std::sqrt(1.0 - ab) * noise[i];
        ForwardResult f = full_forward(zt, t, s.tokens, world.base, &result.adapter, nullptr);
        Map2D tm = extract_token_map(f.attn, static_cast<int>(s.tokens.size()) - 1);
        write_tensor((out / "trigger_map.mct1").string(), map_to_tensor(tm));
    }

    double mass = trigger_mass_ratio(world.base, &result.adapter, dataset, world.schedule, 8,
                                     seed + 3, tc.eps_div);
    std::cout << "trained " << adapter_kind_name(kind) << " adapter for `" << spec.name
              << "` (trigger `" << spec.trigger << "`)\n"
              << "final loss " << result.stats.final_loss << ", mse " << result.stats.final_mse
              << ", in-mask mass " << mass << "\n"
              << "wrote " << adapter_out << "\n";
    return kExitOk;
}

int cmd_generate(const Common& c, const std::vector<std::string>& adapter_flags) {
    RunConfig cfg = resolve_config(c);
    std::vector<std::string> paths = adapter_flags.empty() ? cfg.adapters : adapter_flags;
    if (c.dry_run) {
        print_plan(cfg, "compose " + std::to_string(paths.size()) + " concept(s) over " +
                            std::to_string(cfg.seeds.size()) + " seed(s)");
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    World world = make_world(cfg, c.world_seed);
    ComposePlan plan = assemble_concepts(world, cfg, paths);

    int n = static_cast<int>(cfg.seeds.size());
    std::vector<RunResult> results(static_cast<std::size_t>(n));
    run_in_parallel(n, c.jobs, [&](int i) {
        RunOptions opt = make_run_options(cfg, cfg.seeds[static_cast<std::size_t>(i)]);
        results[static_cast<std::size_t>(i)] = run_mc2(world.base, plan.uncond, plan.branches, opt);
    });

    bool degenerate = false;
    std::vector<Tensor> images;
    std::vector<double> final_inter;
    for (int i = 0; i < n; ++i) {
        const RunResult& r = results[static_cast<std::size_t>(i)];
        std::string tag = "gen_" + std::to_string(cfg.seeds[static_cast<std::size_t>(i)]);
        Tensor rgb = latent_to_image(r.image);
        write_png_rgb((out / (tag + ".png")).string(), rgb);
        write_tensor((out / (tag + ".latent.mct1")).string(), r.image);
        save_trace((out / (tag + ".trace.jsonl")).string(), r.trace);
        for (const auto& [step, z] : r.trace.latent_snapshots)
            write_tensor((out / (tag + ".snap" + std::to_string(step) + ".mct1")).string(), z);
        images.push_back(rgb);
        final_inter.push_back(r.trace.steps.back().post.inter);
        degenerate = degenerate || trace_degenerate(r.trace);
    }
    RunEvaluation eval = evaluate_run(images, plan.specs, world.spec.presence_tau, final_inter);
    std::vector<std::string> names;
    for (const ConceptSpec& s : plan.specs) names.push_back(s.name);
    save_metrics((out / "metrics.jsonl").string(), eval, names);

    std::cout << "generated " << n << " scene(s) in " << out.string() << "\n"
              << "co-occurrence rate " << eval.co_occurrence_rate << ", mean final overlap loss "
              << eval.mean_final_inter << "\n";
    if (degenerate) {
        std::cout << "degenerate diagnostics present in at least one trace\n";
        if (c.strict) return kExitDegenerate;
    }
    return kExitOk;
}

int cmd_compgen(const Common& c, const std::vector<std::string>& subjects_in) {
    RunConfig cfg = resolve_config(c);
    if (c.dry_run) {
        print_plan(cfg, "layout-guided composition over " + std::to_string(cfg.seeds.size()) +
                            " seed(s)");
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    World world = make_world(cfg, c.world_seed);

    std::vector<ConceptSpec> specs;
    if (subjects_in.empty()) {
        specs = world.spec.concepts;
    } else {
        for (const std::string& cat : subjects_in) {
            bool found = false;
            for (const ConceptSpec& s : world.spec.concepts)
                if (s.category == cat) {
                    specs.push_back(s);
                    found = true;
                    break;
                }
            if (!found)
                throw ConfigError("config: `--subject` names no known category: " + cat);
        }
    }
    if (specs.size() < 2)
        throw ConfigError("config: layout composition needs at least two subjects");

    std::vector<int> uncond = uncond_prompt(world.vocab);
    std::vector<SamplerBranch> branches;
    SamplerBranch global;
    global.tokens = global_prompt(world.vocab, specs);
    global.weight = cfg.compgen_w_global;
    branches.push_back(global);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        SubPrompt p = subject_prompt(world.vocab, specs, i);
        SamplerBranch b;
        b.tokens = p.tokens;
        b.triggers = p.triggers;
        b.weight = cfg.compgen_w_concept;
        branches.push_back(b);
    }

    int n = static_cast<int>(cfg.seeds.size());
    std::vector<RunResult> results(static_cast<std::size_t>(n));
    run_in_parallel(n, c.jobs, [&](int i) {
        RunOptions opt = make_run_options(cfg, cfg.seeds[static_cast<std::size_t>(i)]);
        results[static_cast<std::size_t>(i)] =
            run_compgen(world.base, uncond, branches, opt);
    });

    bool degenerate = false;
    std::vector<Tensor> images;
    std::vector<double> final_inter;
    for (int i = 0; i < n; ++i) {
        const RunResult& r = results[static_cast<std::size_t>(i)];
        std::string tag = "cg_" + std::to_string(cfg.seeds[static_cast<std::size_t>(i)]);
        Tensor rgb = latent_to_image(r.image);
        write_png_rgb((out / (tag + ".png")).string(), rgb);
        write_tensor((out / (tag + ".latent.mct1")).string(), r.image);
        save_trace((out / (tag + ".trace.jsonl")).string(), r.trace);
        images.push_back(rgb);
        final_inter.push_back(r.trace.steps.back().post.inter);
        degenerate = degenerate || trace_degenerate(r.trace);
    }
    RunEvaluation eval = evaluate_run(images, specs, world.spec.presence_tau, final_inter);
    std::vector<std::string> names;
    for (const ConceptSpec& s : specs) names.push_back(s.name);
    save_metrics((out / "metrics.jsonl").string(), eval, names);

    std::cout << "generated " << n << " layout scene(s) in " << out.string() << "\n"
              << "co-occurrence rate " << eval.co_occurrence_rate << "\n";
    if (degenerate && c.strict) return kExitDegenerate;
    return kExitOk;
}

int cmd_masks(const Common& c, const std::string& in1, const std::string& in2) {
    RunConfig cfg = resolve_config(c);
    if (c.dry_run) {
        print_plan(cfg, "propose masks from " + in1 + " and " + in2);
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    Map2D a1 = tensor_to_map(read_tensor(in1), in1);
    Map2D a2 = tensor_to_map(read_tensor(in2), in2);
    MaskProposal p = propose_masks(a1, a2, cfg.guidance.mask_proposal);

    write_pgm((out / "mask1.pgm").string(), p.m1);
    write_pgm((out / "mask2.pgm").string(), p.m2);
    write_tensor((out / "mask1.mct1").string(), map_to_tensor(p.m1));
    write_tensor((out / "mask2.mct1").string(), map_to_tensor(p.m2));
    {
        std::ofstream rep(out / "report.jsonl", std::ios::trunc);
        json line;
        line["degenerate"] = p.degenerate;
        line["dominant1"] = p.stats.dominant1;
        line["dominant2"] = p.stats.dominant2;
        line["overlap"] = p.stats.overlap;
        line["excluded1"] = p.stats.excluded1;
        line["excluded2"] = p.stats.excluded2;
        line["union_pixels"] = p.stats.union_pixels;
        line["ring"] = p.stats.ring;
        line["ring_to1"] = p.stats.ring_to1;
        line["ring_to2"] = p.stats.ring_to2;
        rep << line.dump() << "\n";
    }
    std::cout << "masks written to " << out.string() << " (overlap " << p.stats.overlap
              << " px, ring " << p.stats.ring << " px)\n";
    if (p.degenerate) {
        std::cout << "degenerate: both hard masks empty\n";
        if (c.strict) return kExitDegenerate;
    }
    return kExitOk;
}

int cmd_inspect_attn(const Common& c, const std::vector<std::string>& adapter_flags, int step) {
    RunConfig cfg = resolve_config(c);
    if (step < 0) step = cfg.guidance.total_steps / 2;
    if (step >= cfg.guidance.total_steps)
        throw ConfigError("config: `--step` must lie in [0, `total_steps`)");
    cfg.snapshot_step = step;
    std::vector<std::string> paths = adapter_flags.empty() ? cfg.adapters : adapter_flags;
    if (c.dry_run) {
        print_plan(cfg, "dump attention maps at step " + std::to_string(step));
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    World world = make_world(cfg, c.world_seed);
    ComposePlan plan = assemble_concepts(world, cfg, paths);

    RunOptions opt = make_run_options(cfg, cfg.seeds.front());
    RunResult r = run_mc2(world.base, plan.uncond, plan.branches, opt);
    save_trace((out / "trace.jsonl").string(), r.trace);

    for (std::size_t k = 0; k < r.trace.snapshot_token_maps.size(); ++k) {
        const auto& maps = r.trace.snapshot_token_maps[k];
        for (std::size_t i = 0; i < maps.size(); ++i) {
            std::string tag = "attn_b" + std::to_string(k + 1) + "_t" + std::to_string(i);
            write_pgm((out / (tag + ".pgm")).string(), maps[i]);
            write_tensor((out / (tag + ".mct1")).string(), map_to_tensor(maps[i]));
        }
    }
    for (std::size_t k = 0; k < r.trace.snapshot_concept_maps.size(); ++k) {
        std::string tag = "attn_b" + std::to_string(k + 1) + "_agg";
        write_pgm((out / (tag + ".pgm")).string(), r.trace.snapshot_concept_maps[k]);
        write_tensor((out / (tag + ".mct1")).string(),
                     map_to_tensor(r.trace.snapshot_concept_maps[k]));
    }
    std::cout << "attention maps for step " << step << " written to " << out.string() << "\n";
    return kExitOk;
}

int cmd_inspect(const Common& c, const std::string& path) {
    RunConfig cfg = resolve_config(c);
    if (c.dry_run) {
        print_plan(cfg, "inspect " + path);
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    if (fs::is_directory(path)) {
        std::ifstream in(fs::path(path) / "meta");
        if (!in) throw ConfigError("config: " + path + " has no meta file");
        json meta = json::parse(in, nullptr, true);
        std::cout << "dataset: concept `" << meta.value("concept", std::string())
                  << "`, trigger `" << meta.value("trigger", std::string()) << "`, caption \""
                  << meta.value("caption", std::string()) << "\", "
                  << meta.value("count", 0) << " sample(s), " << meta.value("height", 0) << "x"
                  << meta.value("width", 0) << "\n";
        Tensor img = read_png_rgb((fs::path(path) / "000.png").string());
        write_tensor((out / "sample0.mct1").string(), image_to_latent(img));
        std::cout << "wrote " << (out / "sample0.mct1").string() << "\n";
        return kExitOk;
    }
    if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
        LoadedAdapter la = load_adapter(path);
        std::cout << "adapter: kind " << adapter_kind_name(la.adapter.kind) << ", trigger `"
                  << la.adapter.trigger << "` (id " << la.adapter.trigger_id << "), scale "
                  << la.adapter.scale << ", rank " << la.adapter.rank << "\n"
                  << "base fingerprint " << std::hex << la.world_fingerprint << std::dec << "\n";
        for (const auto& [name, t] : la.adapter.payload) {
            std::cout << "  " << name << ": (";
            for (std::size_t a = 0; a < t.rank(); ++a)
                std::cout << (a ? "," : "") << t.extent(a);
            std::cout << "), l2 " << l2_norm(t) << "\n";
            std::string safe = name;
            for (char& ch : safe)
                if (ch == '/' || ch == '.') ch = '_';
            write_tensor((out / ("payload_" + safe + ".mct1")).string(), t);
        }
        return kExitOk;
    }
    Tensor t = read_tensor(path);
    double lo = t.numel() ? t[0] : 0.0, hi = lo, sum = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
        sum += t[i];
    }
    std::cout << "tensor: rank " << t.rank() << ", shape (";
    for (std::size_t a = 0; a < t.rank(); ++a) std::cout << (a ? "," : "") << t.extent(a);
    std::cout << "), min " << lo << ", max " << hi << ", mean "
              << (t.numel() ? sum / static_cast<double>(t.numel()) : 0.0) << ", l2 "
              << l2_norm(t) << "\n";
    write_tensor((out / "inspected.mct1").string(), t);
    return kExitOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& adapter_flags, int runs,
             bool baseline, int train_steps) {
    RunConfig cfg = resolve_config(c);
    if (runs < 1) throw ConfigError("config: `--runs` must be >= 1");
    if (c.dry_run) {
        print_plan(cfg, "score " + std::to_string(runs) + " run(s)" +
                            (baseline ? " with guidance disabled" : ""));
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    World world = make_world(cfg, c.world_seed);

    std::vector<std::string> paths = adapter_flags.empty() ? cfg.adapters : adapter_flags;
    std::vector<LoadedAdapter> loaded;
    std::vector<const ConceptAdapter*> adapters;
    std::vector<ConceptSpec> specs;
    if (!paths.empty()) {
        ComposePlan plan = assemble_concepts(world, cfg, paths);
        loaded = std::move(plan.loaded);
        specs = std::move(plan.specs);
        for (const LoadedAdapter& la : loaded) adapters.push_back(&la.adapter);
    } else {
        TrainConfig tc;
        tc.steps = train_steps;
        tc.eps_div = cfg.guidance.eps_div;
        tc.eps_log = cfg.guidance.eps_log;
        tc.validate();
        for (std::size_t i = 0; i < world.spec.concepts.size(); ++i) {
            const ConceptSpec& spec = world.spec.concepts[i];
            TrainResult tr = train_world_concept(world, spec, AdapterKind::EmbeddingOffset, tc,
                                                 64, cfg.seeds.front() + 11 * (i + 1));
            loaded.push_back(LoadedAdapter{std::move(tr.adapter), params_fingerprint(world.base)});
            specs.push_back(spec);
        }
        for (const LoadedAdapter& la : loaded) adapters.push_back(&la.adapter);
    }

    ScenarioConfig sc;
    sc.seeds = runs;
    sc.seed_base = cfg.seeds.front();
    sc.guidance = cfg.guidance;
    if (baseline) sc.guidance.guided_steps = 0;
    sc.refine_masks = cfg.refine_masks;
    sc.z_space_merge = cfg.z_space_merge;
    sc.w_global = cfg.w_global;
    sc.w_concept = cfg.w_concept;
    ScenarioOutcome outcome = run_scenario(world, adapters, sc);

    std::vector<std::string> names;
    for (const ConceptSpec& s : specs) names.push_back(s.name);
    save_metrics((out / "metrics.jsonl").string(), outcome.eval, names);
    Tensor presence({static_cast<std::size_t>(runs), specs.size()});
    Tensor inter({static_cast<std::size_t>(runs)});
    for (int i = 0; i < runs; ++i) {
        for (std::size_t k = 0; k < specs.size(); ++k)
            presence.at2(i, static_cast<int>(k)) =
                outcome.eval.per_run[static_cast<std::size_t>(i)].presence[k];
        inter[static_cast<std::size_t>(i)] =
            outcome.eval.per_run[static_cast<std::size_t>(i)].final_inter;
        write_png_rgb((out / ("eval_" + std::to_string(i) + ".png")).string(),
                      outcome.images[static_cast<std::size_t>(i)]);
    }
    write_tensor((out / "presence.mct1").string(), presence);
    write_tensor((out / "final_inter.mct1").string(), inter);

    std::cout << "scored " << runs << " run(s): co-occurrence rate "
              << outcome.eval.co_occurrence_rate;
    for (std::size_t k = 0; k < names.size(); ++k)
        std::cout << ", mean presence " << names[k] << " " << outcome.eval.mean_presence[k];
    std::cout << ", mean final overlap loss " << outcome.eval.mean_final_inter << "\n";

    bool degenerate = false;
    for (const RunTrace& tr : outcome.traces) degenerate = degenerate || trace_degenerate(tr);
    if (degenerate && c.strict) return kExitDegenerate;
    return kExitOk;
}

int cmd_gradcheck(const Common& c, int instances, int side, int channels) {
    RunConfig cfg = resolve_config(c);
    if (instances < 1) throw ConfigError("config: `--instances` must be >= 1");
    if (side < 2) throw ConfigError("config: `--size` must be >= 2");
    if (channels < 1) throw ConfigError("config: `--channels` must be >= 1");
    if (c.dry_run) {
        print_plan(cfg, "finite-difference check on " + std::to_string(instances) +
                            " instance(s)");
        return kExitOk;
    }
    fs::path out = ensure_out(cfg);
    GuidanceConfig gcfg = cfg.guidance;
    Rng rng(cfg.seeds.front());

    ModelDims dims;
    dims.latent_channels = channels;
    DenoiserParams params = DenoiserParams::init(dims, 12, rng, 0.5);

    auto shape = {static_cast<std::size_t>(side), static_cast<std::size_t>(side),
                  static_cast<std::size_t>(channels)};
    Tensor errors({static_cast<std::size_t>(instances), 2});
    bool ok = true;
    for (int i = 0; i < instances; ++i) {
        Tensor z = rng.gaussian_tensor(shape);
        int t = 100 + static_cast<int>(rng.below(800));

        std::vector<GuidedBranch> branches(2);
        for (int k = 0; k < 2; ++k) {
            branches[static_cast<std::size_t>(k)].tokens = {1, 2, 3 + 2 * k, 4 + 2 * k};
            branches[static_cast<std::size_t>(k)].triggers = {2, 3};
        }
        LatentGradResult g = grad_wrt_latent(z, t, params, branches, gcfg,
                                             GuidanceObjective::Composition);
        Tensor fd = finite_diff_grad(
            [&](const Tensor& x) {
                return grad_wrt_latent(x, t, params, branches, gcfg,
                                       GuidanceObjective::Composition)
                    .losses.total;
            },
            z, 1e-5);
        Tensor diff = Tensor::zeros_like(fd);
        for (std::size_t j = 0; j < diff.numel(); ++j) diff[j] = fd[j] - g.grad[j];
        double denom = std::max(l2_norm(fd), 1e-12);
        double model_err = l2_norm(diff) / denom;

        std::vector<OracleBranch> obr(2);
        for (int k = 0; k < 2; ++k) {
            obr[static_cast<std::size_t>(k)].anchors =
                rng.gaussian_tensor({3, static_cast<std::size_t>(channels)});
            obr[static_cast<std::size_t>(k)].triggers = {0, 1};
        }
        LatentGradResult og = oracle_grad_wrt_latent(z, obr, gcfg,
                                                     GuidanceObjective::Composition);
        Tensor ofd = finite_diff_grad(
            [&](const Tensor& x) {
                return oracle_objective(x, obr, gcfg, GuidanceObjective::Composition);
            },
            z, 1e-6);
        Tensor odiff = Tensor::zeros_like(ofd);
        for (std::size_t j = 0; j < odiff.numel(); ++j) odiff[j] = ofd[j] - og.grad[j];
        double oracle_err = l2_norm(odiff) / std::max(l2_norm(ofd), 1e-12);

        errors.at2(i, 0) = model_err;
        errors.at2(i, 1) = oracle_err;
        bool pass = model_err < kGradcheckModelTol && oracle_err < kGradcheckOracleTol;
        ok = ok && pass;
        std::cout << "instance " << i << ": model rel err " << model_err << ", oracle rel err "
                  << oracle_err << (pass ? "" : "  EXCEEDS TOLERANCE") << "\n";
    }
    write_tensor((out / "gradcheck.mct1").string(), errors);
    std::cout << (ok ? "all gradients match finite differences\n"
                     : "finite-difference mismatch detected\n");
    return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy multi-concept diffusion composer"};
    app.require_subcommand(1);
    Common c;

    auto* train = app.add_subcommand("train-concept", "fit one concept adapter");
    add_common(train, c);
    std::string concept_name = "ruby", kind_name = "embedding-offset";
    int train_steps = 1000, train_batch = 2, train_dataset_size = 64;
    double train_lr = 1e-4, gamma1 = 0.1, gamma2 = 0.01;
    std::string dataset_dir, make_dataset_dir, adapter_out;
    train->add_option("--concept", concept_name, "world concept to bind");
    train->add_option("--kind", kind_name, "embedding-offset | low-rank | full-delta");
    train->add_option("--steps", train_steps, "optimizer steps");
    train->add_option("--batch", train_batch, "batch size");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--gamma1", gamma1, "in-mask mass loss weight");
    train->add_option("--gamma2", gamma2, "per-pixel cross-entropy weight");
    train->add_option("--dataset", dataset_dir, "train from an existing dataset directory");
    train->add_option("--dataset-size", train_dataset_size, "generated dataset size");
    train->add_option("--make-dataset", make_dataset_dir, "also save the generated dataset here");
    train->add_option("--adapter-out", adapter_out, "checkpoint path");

    auto* gen = app.add_subcommand("generate", "compose customized concepts");
    add_common(gen, c);
    std::vector<std::string> gen_adapters;
    gen->add_option("--adapter", gen_adapters, "adapter checkpoint (repeatable)")->take_all();

    auto* compgen = app.add_subcommand("compgen", "layout-guided composition, no adapters");
    add_common(compgen, c);
    std::vector<std::string> subjects;
    compgen->add_option("--subject", subjects, "category word (repeatable)")->take_all();

    auto* masks = app.add_subcommand("masks", "propose subject masks from two attention maps");
    add_common(masks, c);
    std::string masks_in1, masks_in2;
    masks->add_option("map1", masks_in1, "first aggregated map (MCT1)")->required();
    masks->add_option("map2", masks_in2, "second aggregated map (MCT1)")->required();

    auto* iattn = app.add_subcommand("inspect-attn", "dump per-token and aggregated maps");
    add_common(iattn, c);
    std::vector<std::string> iattn_adapters;
    int iattn_step = -1;
    iattn->add_option("--adapter", iattn_adapters, "adapter checkpoint (repeatable)")->take_all();
    iattn->add_option("--step", iattn_step, "sampling step to snapshot");

    auto* inspect = app.add_subcommand("inspect", "describe a tensor, checkpoint, or dataset");
    add_common(inspect, c);
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "artifact to describe")->required();

    auto* eval = app.add_subcommand("eval", "score composition quality over seeds");
    add_common(eval, c);
    std::vector<std::string> eval_adapters;
    int eval_runs = 5, eval_train_steps = 400;
    bool eval_baseline = false;
    eval->add_option("--adapter", eval_adapters, "adapter checkpoint (repeatable)")->take_all();
    eval->add_option("--runs", eval_runs, "number of seeds");
    eval->add_flag("--baseline", eval_baseline, "disable guidance (composed-score only)");
    eval->add_option("--train-steps", eval_train_steps,
                     "steps for in-process adapter training when none are given");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(gradcheck, c);
    int gc_instances = 20, gc_size = 8, gc_channels = 4;
    gradcheck->add_option("--instances", gc_instances, "random instances");
    gradcheck->add_option("--size", gc_size, "latent side length");
    gradcheck->add_option("--channels", gc_channels, "latent channels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed())
            return cmd_train_concept(c, concept_name, kind_name, train_steps, train_batch,
                                     train_lr, gamma1, gamma2, train_dataset_size, dataset_dir,
                                     make_dataset_dir, adapter_out);
        if (gen->parsed()) return cmd_generate(c, gen_adapters);
        if (compgen->parsed()) return cmd_compgen(c, subjects);
        if (masks->parsed()) return cmd_masks(c, masks_in1, masks_in2);
        if (iattn->parsed()) return cmd_inspect_attn(c, iattn_adapters, iattn_step);
        if (inspect->parsed()) return cmd_inspect(c, inspect_path);
        if (eval->parsed())
            return cmd_eval(c, eval_adapters, eval_runs, eval_baseline, eval_train_steps);
        if (gradcheck->parsed()) return cmd_gradcheck(c, gc_instances, gc_size, gc_channels);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::invalid_argument& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
