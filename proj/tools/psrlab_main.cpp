// psrlab command-line surface: data generation, cleaning, two-stage training,
// benchmark evaluation, the positional-encoding ablation, sampling and
// checkpoint inspection. Exit codes: 0 success, 2 config error, 3 data error,
// 4 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "psrlab/bench.hpp"
#include "psrlab/common.hpp"
#include "psrlab/datagen.hpp"
#include "psrlab/flow.hpp"
#include "psrlab/grpo.hpp"
#include "psrlab/model.hpp"
#include "psrlab/runio.hpp"

namespace fs = std::filesystem;
using namespace psrlab;

namespace {

void ensure_fresh_dir(const std::string& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force)
            throw DataError("output directory '" + dir + "' exists and is not empty (pass --force to reuse)");
    }
    fs::create_directories(dir);
}

std::vector<SubjectMixEntry> parse_subject_mix(const std::string& spec) {
    std::vector<SubjectMixEntry> mix;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("subjects mix: expected count:weight, got " + item);
        SubjectMixEntry e;
        e.count = std::stoi(item.substr(0, colon));
        e.weight = std::stod(item.substr(colon + 1));
        if (e.count < 2 || e.count > 4) throw ConfigError("subjects mix: counts must be 2..4");
        if (e.weight < 0.0) throw ConfigError("subjects mix: negative weight");
        mix.push_back(e);
    }
    if (mix.empty()) throw ConfigError("subjects mix: empty specification");
    return mix;
}

std::vector<TaskMixEntry> parse_task_mix(const std::string& spec) {
    std::vector<TaskMixEntry> mix;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("task mix: expected task:weight, got " + item);
        TaskMixEntry e;
        e.kind = task_kind_by_name(item.substr(0, colon));
        e.weight = std::stod(item.substr(colon + 1));
        if (e.kind == TaskKind::kThree || e.kind == TaskKind::kFour)
            throw ConfigError("task mix: three/four are implied by the subject count");
        mix.push_back(e);
    }
    if (mix.empty()) throw ConfigError("task mix: empty specification");
    return mix;
}

RewardWeights parse_weights(const std::string& spec) {
    double w1 = 0.0, w2 = 0.0, w3 = 0.0;
    if (std::sscanf(spec.c_str(), "%lf,%lf,%lf", &w1, &w2, &w3) != 3)
        throw ConfigError("weights: expected w_psr,w_semantic,w_aesthetic");
    if (w1 < 0.0 || w2 < 0.0 || w3 < 0.0) throw ConfigError("weights: negative weight");
    return RewardWeights{w1, w2, w3};
}

struct ModelFlags {
    int d_model = 128;
    int heads = 4;
    int layers = 4;
    int patch = 4;
    int n_max_refs = 4;
    int time_dim = 32;
    std::string encoding = "frame";
    std::size_t resolution = 32;

    void attach(CLI::App* app) {
        app->add_option("--d-model", d_model, "token width");
        app->add_option("--heads", heads, "attention heads");
        app->add_option("--layers", layers, "transformer blocks");
        app->add_option("--patch", patch, "patch size in pixels");
        app->add_option("--n-max-refs", n_max_refs, "maximum reference images");
        app->add_option("--time-dim", time_dim, "sinusoidal time feature width");
        app->add_option("--encoding", encoding, "positional encoding variant: frame|hw|w|h");
        app->add_option("--resolution", resolution, "raster side length");
    }

    ModelConfig to_config() const {
        ModelConfig cfg;
        cfg.d_model = d_model;
        cfg.heads = heads;
        cfg.layers = layers;
        cfg.patch = patch;
        cfg.n_max_refs = n_max_refs;
        cfg.time_dim = time_dim;
        cfg.encoding = encoding_variant_by_name(encoding);
        cfg.raster_h = resolution;
        cfg.raster_w = resolution;
        cfg.validate();
        return cfg;
    }
};

std::string default_sidecar(const std::string& checkpoint) {
    return (fs::path(checkpoint).parent_path() / "model_config.json").string();
}

ModelConfig load_config_for(const std::string& checkpoint, const std::string& explicit_path) {
    const std::string path = explicit_path.empty() ? default_sidecar(checkpoint) : explicit_path;
    if (!fs::exists(path))
        throw DataError("model config not found at '" + path + "' (pass --model-config)");
    return load_model_config(path);
}

std::vector<BenchCase> load_or_build_bench(const std::string& dir, std::uint64_t bench_seed, int cases_per_subset) {
    if (fs::exists(fs::path(dir) / "manifest.jsonl")) return load_bench(dir);
    std::vector<BenchCase> cases = build_bench(bench_seed, cases_per_subset);
    save_bench(dir, cases);
    return cases;
}

void write_config_map(const std::string& dir, const std::map<std::string, std::string>& kv) {
    write_effective_config((fs::path(dir) / "effective-config.txt").string(), kv);
}

std::string u64s(std::uint64_t v) { return std::to_string(v); }
std::string ds(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Expands "--config FILE" into "--key=value" tokens placed where the flag
// stood, so explicit command-line flags given later take precedence and
// unknown keys are rejected by normal option parsing.
std::vector<std::string> expand_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string file;
        std::size_t span = 0;
        if (args[i] == "--config" && i + 1 < args.size()) {
            file = args[i + 1];
            span = 2;
        } else if (args[i].rfind("--config=", 0) == 0) {
            file = args[i].substr(9);
            span = 1;
        }
        if (span == 0) continue;
        const auto kv = parse_config_file(file);
        std::vector<std::string> expanded;
        expanded.reserve(kv.size());
        for (const auto& [k, v] : kv) expanded.push_back("--" + k + "=" + v);
        args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                   args.begin() + static_cast<std::ptrdiff_t>(i + span));
        args.insert(args.begin() + static_cast<std::ptrdiff_t>(i), expanded.begin(), expanded.end());
        i += expanded.size();
        if (i >= args.size()) break;
    }
    return args;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"psrlab: desk-scale multi-subject personalized generation lab"};
    app.require_subcommand(1);
    std::string config_dummy_;  // --config is expanded before parsing; registered for --help only
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    // ----------------------------------------------------------------- gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a paired multi-subject dataset");
    std::string gen_out;
    DatagenConfig gen_cfg;
    std::string gen_subjects = "2:0.9,3:0.05,4:0.05";
    std::string gen_tasks = "attribute:0.2,background:0.2,action:0.2,position:0.2,complex:0.2";
    bool gen_png = false, gen_force = false;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--num-samples", gen_cfg.num_samples, "sample count");
    gen->add_option("--seed", gen_cfg.master_seed, "master seed");
    gen->add_option("--subjects", gen_subjects, "subject-count mix, e.g. 2:0.9,3:0.05,4:0.05");
    gen->add_option("--task-mix", gen_tasks, "task mix for 2-subject samples");
    gen->add_option("--resolution", gen_cfg.resolution, "raster side length");
    gen->add_flag("--png", gen_png, "also write PNG previews");
    gen->add_flag("--force", gen_force, "allow writing into a non-empty directory");
    gen->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // -------------------------------------------------------------------- clean
    auto* cln = app.add_subcommand("clean", "filter a dataset by consistency and semantic thresholds");
    std::string cln_data, cln_out, cln_thresholds;
    double cln_tau_sim = 0.6, cln_tau_sem = 0.7;
    bool cln_force = false;
    cln->add_option("--data", cln_data, "input dataset directory")->required();
    cln->add_option("--out", cln_out, "output dataset directory")->required();
    cln->add_option("--tau-sim", cln_tau_sim, "consistency threshold");
    cln->add_option("--tau-sem", cln_tau_sem, "semantic threshold");
    cln->add_option("--clean-thresholds", cln_thresholds, "combined thresholds: tau_sim,tau_sem");
    cln->add_flag("--force", cln_force, "allow writing into a non-empty directory");
    cln->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // ---------------------------------------------------------------- train-sft
    auto* sft = app.add_subcommand("train-sft", "first-stage flow-matching training");
    std::string sft_data, sft_out, sft_init, sft_ref_mix = "0.9,0.05,0.05";
    SftConfig sft_cfg;
    ModelFlags sft_model;
    bool sft_force = false;
    sft->add_option("--data", sft_data, "dataset directory")->required();
    sft->add_option("--out", sft_out, "output directory")->required();
    sft->add_option("--init", sft_init, "optional warm-start checkpoint");
    sft->add_option("--steps", sft_cfg.steps, "training steps");
    sft->add_option("--batch", sft_cfg.batch, "batch size");
    sft->add_option("--lr", sft_cfg.lr, "learning rate");
    sft->add_option("--seed", sft_cfg.seed, "seed");
    sft->add_option("--ref-mix", sft_ref_mix, "reference-count probabilities for 2,3,4 refs");
    sft->add_option("--log-every", sft_cfg.log_every, "metrics cadence");
    sft_model.attach(sft);
    sft->add_flag("--force", sft_force, "allow writing into a non-empty directory");
    sft->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // --------------------------------------------------------------- train-grpo
    auto* rl = app.add_subcommand("train-grpo", "second-stage online RL with grouped rollouts");
    std::string rl_data, rl_out, rl_init, rl_model_config, rl_weights = "0.4,0.4,0.2";
    GrpoConfig rl_cfg;
    bool rl_force = false;
    rl->add_option("--data", rl_data, "prompt dataset directory")->required();
    rl->add_option("--init", rl_init, "starting checkpoint (SFT)")->required();
    rl->add_option("--out", rl_out, "output directory")->required();
    rl->add_option("--model-config", rl_model_config, "model config sidecar (default: next to --init)");
    rl->add_option("--iterations", rl_cfg.iterations, "GRPO iterations");
    rl->add_option("--group-size", rl_cfg.group_size, "rollout group size G");
    rl->add_option("--clip", rl_cfg.clip, "ratio clip epsilon");
    rl->add_option("--kl", rl_cfg.kl_coef, "KL regularization coefficient");
    rl->add_option("--noise-level", rl_cfg.noise_level, "SDE noise scale a");
    rl->add_option("--grid-steps", rl_cfg.grid.steps, "sampling grid steps T");
    rl->add_option("--epsilon", rl_cfg.grid.epsilon, "grid boundary clip");
    rl->add_option("--lr", rl_cfg.lr, "learning rate");
    rl->add_option("--prompts-per-batch", rl_cfg.prompts_per_batch, "prompt conditions per iteration");
    rl->add_option("--seed", rl_cfg.seed, "seed");
    rl->add_option("--checkpoint-every", rl_cfg.checkpoint_every, "periodic checkpoint cadence");
    rl->add_option("--step-subsample", rl_cfg.step_subsample, "experimental: train on every n-th step");
    rl->add_option("--threads", rl_cfg.threads, "worker threads (1 = bit-deterministic)");
    rl->add_option("--weights", rl_weights, "reward weights w_psr,w_semantic,w_aesthetic");
    rl->add_flag("--force", rl_force, "allow writing into a non-empty directory");
    rl->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // --------------------------------------------------------------------- eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the benchmark");
    std::string ev_ckpt, ev_model_config, ev_bench, ev_out = "report.json", ev_sampler = "ode",
                ev_weights = "0.4,0.4,0.2";
    EvalOptions ev_opts;
    std::uint64_t ev_bench_seed = 7;
    int ev_cases = 50;
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--model-config", ev_model_config, "model config sidecar (default: next to checkpoint)");
    ev->add_option("--bench-dir", ev_bench, "benchmark directory (built there if missing)")->required();
    ev->add_option("--bench-seed", ev_bench_seed, "seed used when building a missing bench");
    ev->add_option("--cases-per-subset", ev_cases, "cases per subset when building a missing bench");
    ev->add_option("--out", ev_out, "report JSON path");
    ev->add_option("--sampler", ev_sampler, "ode|sde");
    ev->add_option("--seed", ev_opts.seed, "evaluation seed");
    ev->add_option("--grid-steps", ev_opts.grid.steps, "sampling grid steps");
    ev->add_option("--epsilon", ev_opts.grid.epsilon, "grid boundary clip");
    ev->add_option("--noise-level", ev_opts.noise_level, "SDE noise scale (sde sampler)");
    ev->add_option("--samples-per-case", ev_opts.samples_per_case, "repeat samples per case");
    ev->add_option("--threads", ev_opts.threads, "worker threads");
    ev->add_option("--weights", ev_weights, "reward weights");
    ev->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // ------------------------------------------------------------------- ablate
    auto* ab = app.add_subcommand("ablate", "positional-encoding offset-strategy comparison");
    std::string ab_data, ab_out, ab_bench, ab_variants = "frame,hw,w,h";
    ModelFlags ab_model;
    int ab_steps = 2000, ab_batch = 4, ab_cases = 10;
    double ab_lr = 1e-4;
    std::uint64_t ab_seed = 0, ab_eval_seed = 0, ab_bench_seed = 7;
    bool ab_force = false;
    int ab_threads = 1;
    ab->add_option("--data", ab_data, "training dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--bench-dir", ab_bench, "benchmark directory (built there if missing)")->required();
    ab->add_option("--bench-seed", ab_bench_seed, "seed used when building a missing bench");
    ab->add_option("--cases-per-subset", ab_cases, "cases per subset when building a missing bench");
    ab->add_option("--variants", ab_variants, "comma list of frame,hw,w,h");
    ab->add_option("--train-steps", ab_steps, "SFT budget per variant");
    ab->add_option("--batch", ab_batch, "batch size");
    ab->add_option("--lr", ab_lr, "learning rate");
    ab->add_option("--seed", ab_seed, "init + data order seed (shared across variants)");
    ab->add_option("--eval-seed", ab_eval_seed, "evaluation seed");
    ab->add_option("--threads", ab_threads, "worker threads for evaluation");
    ab_model.attach(ab);
    ab->add_flag("--force", ab_force, "allow writing into a non-empty directory");
    ab->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // ------------------------------------------------------------------- sample
    auto* smp = app.add_subcommand("sample", "sample rasters for one bench case");
    std::string smp_ckpt, smp_model_config, smp_bench, smp_out, smp_subset = "attribute", smp_sampler = "ode";
    int smp_index = 0;
    std::uint64_t smp_seed = 0, smp_bench_seed = 7;
    int smp_cases = 50;
    TimeGrid smp_grid;
    double smp_noise = 0.7;
    bool smp_force = false;
    smp->add_option("--checkpoint", smp_ckpt, "model checkpoint")->required();
    smp->add_option("--model-config", smp_model_config, "model config sidecar");
    smp->add_option("--bench-dir", smp_bench, "benchmark directory (built there if missing)")->required();
    smp->add_option("--bench-seed", smp_bench_seed, "seed used when building a missing bench");
    smp->add_option("--cases-per-subset", smp_cases, "cases per subset when building a missing bench");
    smp->add_option("--subset", smp_subset, "bench subset name");
    smp->add_option("--index", smp_index, "case index inside the subset");
    smp->add_option("--out", smp_out, "output directory")->required();
    smp->add_option("--sampler", smp_sampler, "ode|sde");
    smp->add_option("--seed", smp_seed, "sampling seed");
    smp->add_option("--grid-steps", smp_grid.steps, "sampling grid steps");
    smp->add_option("--epsilon", smp_grid.epsilon, "grid boundary clip");
    smp->add_option("--noise-level", smp_noise, "SDE noise scale");
    smp->add_flag("--force", smp_force, "allow writing into a non-empty directory");
    smp->add_option("--config", config_dummy_, "flat key=value config file; explicit flags override");

    // ------------------------------------------------------------------ inspect
    auto* ins = app.add_subcommand("inspect", "print a checkpoint / dataset / bench summary");
    std::string ins_ckpt, ins_data, ins_bench;
    ins->add_option("--checkpoint", ins_ckpt, "checkpoint path");
    ins->add_option("--data", ins_data, "dataset directory");
    ins->add_option("--bench-dir", ins_bench, "bench directory");

    try {
        std::vector<std::string> args = expand_config_args(argc, argv);
        std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    if (gen->parsed()) {
        ensure_fresh_dir(gen_out, gen_force);
        gen_cfg.subject_mix = parse_subject_mix(gen_subjects);
        gen_cfg.task_mix = parse_task_mix(gen_tasks);
        gen_cfg.write_png = gen_png;
        const DatasetSummary summary = generate_dataset(gen_out, gen_cfg);
        write_config_map(gen_out, {{"command", "gen-data"},
                                   {"num_samples", std::to_string(gen_cfg.num_samples)},
                                   {"seed", u64s(gen_cfg.master_seed)},
                                   {"subjects", gen_subjects},
                                   {"task_mix", gen_tasks},
                                   {"resolution", std::to_string(gen_cfg.resolution)},
                                   {"png", gen_png ? "1" : "0"}});
        std::cout << "gen-data: wrote " << summary.samples << " samples (regenerated " << summary.regenerated
                  << ") manifest_hash=" << summary.manifest_hash << "\n";
        return 0;
    }

    if (cln->parsed()) {
        if (!cln_thresholds.empty() &&
            std::sscanf(cln_thresholds.c_str(), "%lf,%lf", &cln_tau_sim, &cln_tau_sem) != 2)
            throw ConfigError("--clean-thresholds: expected tau_sim,tau_sem");
        ensure_fresh_dir(cln_out, cln_force);
        const auto samples = load_dataset(cln_data);
        const auto [kept, report] = clean(samples, cln_tau_sim, cln_tau_sem);
        write_dataset(cln_out, kept, false);
        write_text_atomic((fs::path(cln_out) / "clean_report.json").string(),
                          clean_report_to_json(report).dump(2) + "\n");
        write_config_map(cln_out, {{"command", "clean"},
                                   {"data", cln_data},
                                   {"tau_sim", ds(cln_tau_sim)},
                                   {"tau_sem", ds(cln_tau_sem)}});
        std::cout << "clean: kept " << report.kept << " dropped_consistency " << report.dropped_consistency
                  << " dropped_semantic " << report.dropped_semantic << "\n";
        return 0;
    }

    if (sft->parsed()) {
        ensure_fresh_dir(sft_out, sft_force);
        if (std::sscanf(sft_ref_mix.c_str(), "%lf,%lf,%lf", &sft_cfg.ref_count_probs[0], &sft_cfg.ref_count_probs[1],
                        &sft_cfg.ref_count_probs[2]) != 3)
            throw ConfigError("--ref-mix: expected p2,p3,p4");
        ModelConfig cfg = sft_model.to_config();
        ParamMap params = sft_init.empty() ? init_params(cfg, sft_cfg.seed) : load_checkpoint(sft_init);
        const auto data = load_dataset(sft_data);
        std::ofstream metrics((fs::path(sft_out) / "metrics.jsonl").string(), std::ios::trunc);
        const SftResult result = sft_train(params, cfg, data, sft_cfg, &metrics);
        save_checkpoint((fs::path(sft_out) / "checkpoint_final.ckpt").string(), params);
        save_model_config((fs::path(sft_out) / "model_config.json").string(), cfg);
        write_config_map(sft_out, {{"command", "train-sft"},
                                   {"data", sft_data},
                                   {"steps", std::to_string(sft_cfg.steps)},
                                   {"batch", std::to_string(sft_cfg.batch)},
                                   {"lr", ds(sft_cfg.lr)},
                                   {"seed", u64s(sft_cfg.seed)},
                                   {"ref_mix", sft_ref_mix},
                                   {"encoding", sft_model.encoding},
                                   {"d_model", std::to_string(sft_model.d_model)},
                                   {"heads", std::to_string(sft_model.heads)},
                                   {"layers", std::to_string(sft_model.layers)},
                                   {"patch", std::to_string(sft_model.patch)},
                                   {"resolution", std::to_string(sft_model.resolution)}});
        std::cout << "train-sft: " << result.steps_done << " steps, recent loss " << result.mean_recent_loss
                  << "\n";
        return 0;
    }

    if (rl->parsed()) {
        ensure_fresh_dir(rl_out, rl_force);
        const ModelConfig cfg = load_config_for(rl_init, rl_model_config);
        ParamMap params = load_checkpoint(rl_init);
        const RewardWeights weights = parse_weights(rl_weights);
        const auto data = load_dataset(rl_data);
        const GrpoTrainResult result = grpo_train(params, cfg, data, rl_cfg, weights, rl_out);
        write_config_map(rl_out, {{"command", "train-grpo"},
                                  {"data", rl_data},
                                  {"init", rl_init},
                                  {"iterations", std::to_string(rl_cfg.iterations)},
                                  {"group_size", std::to_string(rl_cfg.group_size)},
                                  {"clip", ds(rl_cfg.clip)},
                                  {"kl", ds(rl_cfg.kl_coef)},
                                  {"noise_level", ds(rl_cfg.noise_level)},
                                  {"grid_steps", std::to_string(rl_cfg.grid.steps)},
                                  {"epsilon", ds(rl_cfg.grid.epsilon)},
                                  {"lr", ds(rl_cfg.lr)},
                                  {"prompts_per_batch", std::to_string(rl_cfg.prompts_per_batch)},
                                  {"seed", u64s(rl_cfg.seed)},
                                  {"weights", rl_weights},
                                  {"threads", std::to_string(rl_cfg.threads)}});
        if (result.halted_nonfinite) {
            std::cerr << "train-grpo: halted on non-finite loss after " << result.iterations_done
                      << " iterations; last good checkpoint retained\n";
            return 4;
        }
        std::cout << "train-grpo: " << result.iterations_done << " iterations";
        if (!result.log.empty()) std::cout << ", final mean_psr " << result.log.back().mean_psr;
        std::cout << "\n";
        return 0;
    }

    if (ev->parsed()) {
        const ModelConfig cfg = load_config_for(ev_ckpt, ev_model_config);
        const ParamMap params = load_checkpoint(ev_ckpt);
        const auto bench = load_or_build_bench(ev_bench, ev_bench_seed, ev_cases);
        ev_opts.sampler = sampler_by_name(ev_sampler);
        ev_opts.weights = parse_weights(ev_weights);
        Report report = evaluate(params, cfg, bench, ev_opts);
        report.bench_hash = bench_manifest_hash(ev_bench);
        report.checkpoint = ev_ckpt;
        write_text_atomic(ev_out, report_to_json(report).dump(2) + "\n");
        write_text_atomic(ev_out + ".txt", report_to_table(report));
        std::cout << report_to_table(report);
        return 0;
    }

    if (ab->parsed()) {
        ensure_fresh_dir(ab_out, ab_force);
        const auto data = load_dataset(ab_data);
        const auto bench = load_or_build_bench(ab_bench, ab_bench_seed, ab_cases);
        AblationOptions opts;
        opts.variants.clear();
        std::stringstream ss(ab_variants);
        std::string item;
        while (std::getline(ss, item, ',')) opts.variants.push_back(encoding_variant_by_name(item));
        opts.train.steps = ab_steps;
        opts.train.batch = ab_batch;
        opts.train.lr = ab_lr;
        opts.train.seed = ab_seed;
        opts.init_seed = ab_seed;
        opts.eval.seed = ab_eval_seed;
        opts.eval.threads = ab_threads;
        const AblationTable table = ablate_positional(ab_model.to_config(), data, bench, opts);
        write_text_atomic((fs::path(ab_out) / "ablation.json").string(), ablation_to_json(table).dump(2) + "\n");
        write_text_atomic((fs::path(ab_out) / "ablation.txt").string(), ablation_to_table(table));
        write_config_map(ab_out, {{"command", "ablate"},
                                  {"data", ab_data},
                                  {"variants", ab_variants},
                                  {"train_steps", std::to_string(ab_steps)},
                                  {"batch", std::to_string(ab_batch)},
                                  {"lr", ds(ab_lr)},
                                  {"seed", u64s(ab_seed)},
                                  {"eval_seed", u64s(ab_eval_seed)}});
        std::cout << ablation_to_table(table);
        return 0;
    }

    if (smp->parsed()) {
        ensure_fresh_dir(smp_out, smp_force);
        const ModelConfig cfg = load_config_for(smp_ckpt, smp_model_config);
        const ParamMap params = load_checkpoint(smp_ckpt);
        const auto bench = load_or_build_bench(smp_bench, smp_bench_seed, smp_cases);
        const TaskKind subset = task_kind_by_name(smp_subset);
        const BenchCase* found = nullptr;
        for (const auto& c : bench)
            if (c.subset == subset && c.index == smp_index) found = &c;
        if (!found) throw DataError("sample: no bench case " + smp_subset + "/" + std::to_string(smp_index));

        Rng rng(mix64(smp_seed ^ 0x73616d706c657267ULL));
        SampleResult result;
        if (sampler_by_name(smp_sampler) == SamplerKind::kOde) {
            result = ode_sample(params, cfg, found->condition, smp_grid, rng);
        } else {
            ModelTrajectory t = sde_sample(params, cfg, found->condition, smp_grid, smp_noise, rng);
            result.raster = std::move(t.final_raster);
            result.preclamp = std::move(t.final_preclamp);
        }
        save_raster((fs::path(smp_out) / "output.psr").string(), result.raster);
        save_png((fs::path(smp_out) / "output.png").string(), result.raster);
        for (std::size_t k = 0; k < found->condition.refs.size(); ++k) {
            save_raster((fs::path(smp_out) / ("ref" + std::to_string(k) + ".psr")).string(),
                        found->condition.refs[k]);
            save_png((fs::path(smp_out) / ("ref" + std::to_string(k) + ".png")).string(),
                     found->condition.refs[k]);
        }
        const RewardBreakdown rb = evaluate_rewards(result.raster, result.preclamp, found->condition.refs,
                                                    found->condition.categories, found->condition.instruction,
                                                    RewardWeights{});
        write_text_atomic((fs::path(smp_out) / "rewards.json").string(), reward_to_json(rb).dump(2) + "\n");
        write_text_atomic((fs::path(smp_out) / "instruction.txt").string(),
                          found->condition.instruction.text + "\n");
        write_config_map(smp_out, {{"command", "sample"},
                                   {"checkpoint", smp_ckpt},
                                   {"subset", smp_subset},
                                   {"index", std::to_string(smp_index)},
                                   {"sampler", smp_sampler},
                                   {"seed", u64s(smp_seed)}});
        std::cout << "sample: psr " << rb.psr << " semantic " << rb.semantic << " aesthetic " << rb.aesthetic
                  << "\n";
        return 0;
    }

    if (ins->parsed()) {
        if (!ins_ckpt.empty()) {
            const ParamMap params = load_checkpoint(ins_ckpt);
            std::size_t total = 0;
            for (const auto& [name, t] : params) total += t.numel();
            std::cout << "checkpoint: " << ins_ckpt << "\n  parameters: " << params.size() << " tensors, " << total
                      << " scalars\n";
            const std::string sidecar = default_sidecar(ins_ckpt);
            if (fs::exists(sidecar))
                std::cout << "  model config: " << model_config_to_json(load_model_config(sidecar)).dump() << "\n";
        }
        if (!ins_data.empty()) {
            const auto samples = load_dataset(ins_data);
            std::map<int, int> by_count;
            for (const auto& s : samples) by_count[static_cast<int>(s.refs.size())] += 1;
            std::cout << "dataset: " << ins_data << "\n  samples: " << samples.size()
                      << " manifest_hash=" << dataset_manifest_hash(ins_data) << "\n";
            for (const auto& [count, n] : by_count) std::cout << "  " << count << " refs: " << n << "\n";
        }
        if (!ins_bench.empty()) {
            const auto cases = load_bench(ins_bench);
            std::cout << "bench: " << ins_bench << "\n  cases: " << cases.size()
                      << " manifest_hash=" << bench_manifest_hash(ins_bench) << "\n";
        }
        if (ins_ckpt.empty() && ins_data.empty() && ins_bench.empty())
            throw ConfigError("inspect: pass --checkpoint, --data or --bench-dir");
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
