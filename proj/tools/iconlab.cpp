// iconlab <datagen|train|eval|report>
//
// Every command writes config.json (the merged configuration) and
// manifest.json into its output directory.

#include "iconlab/checkpoint.hpp"
#include "iconlab/error.hpp"
#include "iconlab/genicon.hpp"
#include "iconlab/icon.hpp"
#include "iconlab/oracle.hpp"
#include "iconlab/prompt.hpp"
#include "iconlab/rde.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace iconlab;

namespace {

constexpr const char* kToolVersion = "iconlab/1";

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void make_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw IoError("cannot create output directory " + dir.string());
    }
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Config file contents, or an empty object.
json base_config(const std::string& path) { return path.empty() ? json::object() : read_json(path); }

// ---- datagen ------------------------------------------------------------------

struct DatagenArgs {
    std::string config;
    std::string family;
    std::string out;
    std::optional<std::int64_t> count, pairs, per_pair, shard_size;
    std::optional<int> J, grid_points;
    std::optional<std::uint64_t> seed;
    std::optional<double> sigma;
    bool rotations = false;
};

FamilyConfig resolve_family(const std::string& name, const json& overrides) {
    FamilyConfig base = FamilyConfig::defaults(parse_family(name));
    if (overrides.is_null() || overrides.empty()) return base;
    json merged = base.to_json();
    merged.merge_patch(overrides);
    // A smaller grid without explicit counts observes every point.
    if (overrides.contains("grid_points") && !overrides.contains("obs_counts")) {
        const int g = overrides["grid_points"].get<int>();
        if (std::any_of(base.obs_counts.begin(), base.obs_counts.end(), [g](int m) { return m > g; })) {
            merged["obs_counts"] = {g};
        }
    }
    return FamilyConfig::from_json(merged);
}

int cmd_datagen(const DatagenArgs& a) {
    json cfg = base_config(a.config);
    if (!a.family.empty()) cfg["family"] = a.family;
    if (a.count) cfg["count"] = *a.count;
    if (a.pairs) cfg["pairs"] = *a.pairs;
    if (a.per_pair) cfg["per_pair"] = *a.per_pair;
    if (a.J) cfg["J"] = *a.J;
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.shard_size) cfg["shard_size"] = *a.shard_size;
    if (a.rotations) cfg["rotations"] = true;
    if (a.sigma) cfg["family_config"]["noise"]["sigma"] = *a.sigma;
    if (a.grid_points) cfg["family_config"]["grid_points"] = *a.grid_points;
    if (!cfg.contains("family")) {
        throw InputError("datagen needs --family");
    }
    const FamilyConfig fc = resolve_family(cfg["family"].get<std::string>(), cfg.value("family_config", json::object()));
    fc.validate();
    const bool per_pair_mode = cfg.contains("pairs") || cfg.contains("per_pair");
    const std::int64_t tasks = per_pair_mode ? cfg.value("pairs", std::int64_t{1}) : cfg.value("count", std::int64_t{1});
    const std::int64_t per = per_pair_mode ? cfg.value("per_pair", std::int64_t{1}) : 1;
    const int J = cfg.value("J", 6);
    const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
    const bool rotations = cfg.value("rotations", false);
    const std::int64_t shard_size = cfg.value("shard_size", std::int64_t{10000});
    if (tasks < 0 || per < 1 || J < 2 || shard_size < 1) {
        throw InputError("datagen needs count >= 0, per_pair >= 1, J >= 2 and shard_size >= 1");
    }
    const json resolved = {{"command", "datagen"},
                           {"family", family_name(fc.family)},
                           {"family_config", fc.to_json()},
                           {"tasks", tasks},
                           {"per_pair", per},
                           {"J", J},
                           {"seed", seed},
                           {"rotations", rotations},
                           {"shard_size", shard_size}};

    const fs::path out(a.out);
    make_out_dir(out);
    const TaskGenerator gen(fc);
    ShardHeader header;
    header.family = family_name(fc.family);
    header.config_hash = fc.hash();
    header.j_max = J - 1;
    header.grid = gen.grid().points;
    header.family_config = fc.to_json();

    std::vector<std::string> names;
    std::int64_t total = 0;
    DatasetShard shard;
    shard.header = header;
    const auto flush = [&] {
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.jsonl", names.size());
        shard.header.count = static_cast<std::int64_t>(shard.records.size());
        write_shard(out / name, shard);
        names.emplace_back(name);
        total += shard.header.count;
        shard.records.clear();
    };
    for (std::int64_t t = 0; t < tasks; ++t) {
        Rng rng(stream_seed(seed, static_cast<std::uint64_t>(t)));
        std::vector<TaskSample> samples;
        if (per_pair_mode) {
            const auto alpha = gen.draw_alpha(rng);
            for (std::int64_t m = 0; m < per; ++m) {
                TaskSample s{fc.family, alpha, {}};
                for (int j = 0; j < J; ++j) s.pairs.push_back(gen.draw_pair(alpha, rng));
                samples.push_back(std::move(s));
            }
        } else {
            samples.push_back(gen.generate(J, rng));
        }
        for (const auto& s : samples) {
            for (auto& p : make_prompts(s, gen.grid(), rng, {.rotations = rotations})) {
                shard.records.push_back(std::move(p));
                if (static_cast<std::int64_t>(shard.records.size()) == shard_size) flush();
            }
        }
    }
    if (!shard.records.empty() || names.empty()) flush();

    write_json(out / "config.json", resolved);
    write_json(out / "manifest.json", {{"tool", kToolVersion},
                                       {"command", "datagen"},
                                       {"family", header.family},
                                       {"config_hash", header.config_hash},
                                       {"records", total},
                                       {"shards", names},
                                       {"config", resolved}});
    std::cout << "wrote " << total << " records in " << names.size() << " shard(s) to " << out.string() << "\n";
    return 0;
}

// Shard paths from explicit files and/or a datagen output directory.
std::vector<fs::path> collect_shards(const std::vector<std::string>& files, const std::string& data_dir) {
    std::vector<fs::path> out(files.begin(), files.end());
    if (!data_dir.empty()) {
        const json m = read_json(fs::path(data_dir) / "manifest.json");
        for (const auto& name : m.at("shards")) out.push_back(fs::path(data_dir) / name.get<std::string>());
    }
    if (out.empty()) {
        throw InputError("no shards given (use --shards or --data)");
    }
    for (const auto& p : out) {
        if (!fs::exists(p)) {
            throw InputError("shard not found: " + p.string());
        }
    }
    return out;
}

std::vector<std::string> path_strings(const std::vector<fs::path>& ps) {
    std::vector<std::string> s;
    for (const auto& p : ps) s.push_back(p.string());
    return s;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
    std::string mode;
    std::string config;
    std::vector<std::string> shards;
    std::string data;
    std::string out;
    std::string preset = "desk";
    std::optional<std::int64_t> steps;
    std::optional<int> batch, ratio;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    int log_every = 0;
};

int cmd_train(const TrainArgs& a) {
    const auto shards = collect_shards(a.shards, a.data);
    ShardHeader header;
    const auto data = load_prompts(shards, &header);
    if (data.empty()) {
        throw InputError("training shards hold no records");
    }
    const fs::path out(a.out);
    make_out_dir(out);
    const json file = base_config(a.config);
    const json data_meta = {{"family", header.family}, {"config_hash", header.config_hash}};
    json resolved;
    if (a.mode == "icon") {
        json j = a.preset == "reference" ? to_json(IconConfig::reference()) : to_json(IconConfig::desk());
        j.merge_patch(file);
        if (a.steps) j["optim"]["total_steps"] = *a.steps;
        if (a.lr) j["optim"]["peak_lr"] = *a.lr;
        if (a.batch) j["batch_size"] = *a.batch;
        if (a.seed) j["seed"] = *a.seed;
        if (a.ratio) throw InputError("--ratio applies to genicon training only");
        const IconConfig c = icon_config_from_json(j);
        resolved = {{"command", "train"}, {"mode", "icon"}, {"train", to_json(c)}, {"data", data_meta}};
        write_json(out / "config.json", resolved);
        TrainPaths paths;
        paths.checkpoint = out / "model.ckpt";
        paths.trace = out / "trace.csv";
        paths.meta = data_meta;
        paths.log = a.log_every > 0 ? &std::cout : nullptr;
        paths.log_every = a.log_every;
        const auto r = train_icon(c, data, paths);
        std::cout << "final loss " << r.losses.back() << "\n";
    } else if (a.mode == "genicon") {
        json j = a.preset == "reference" ? to_json(GanConfig::reference()) : to_json(GanConfig::desk());
        j.merge_patch(file);
        if (a.steps) j["steps"] = *a.steps;
        if (a.lr) {
            j["optim_g"]["peak_lr"] = *a.lr;
            j["optim_d"]["peak_lr"] = *a.lr;
        }
        if (a.batch) j["batch_size"] = *a.batch;
        if (a.seed) j["seed"] = *a.seed;
        if (a.ratio) j["disc_steps"] = *a.ratio;
        const GanConfig c = gan_config_from_json(j);
        resolved = {{"command", "train"}, {"mode", "genicon"}, {"train", to_json(c)}, {"data", data_meta}};
        write_json(out / "config.json", resolved);
        GanPaths paths;
        paths.generator = out / "generator.ckpt";
        paths.discriminator = out / "discriminator.ckpt";
        paths.trace = out / "trace.csv";
        paths.meta = data_meta;
        paths.log = a.log_every > 0 ? &std::cout : nullptr;
        paths.log_every = a.log_every;
        train_genicon(c, data, paths);
    } else {
        throw InputError("train mode must be icon or genicon");
    }
    json outputs = a.mode == "icon" ? json{"model.ckpt", "trace.csv"}
                                    : json{"generator.ckpt", "discriminator.ckpt", "trace.csv"};
    write_json(out / "manifest.json", {{"tool", kToolVersion},
                                       {"command", "train"},
                                       {"mode", a.mode},
                                       {"family", header.family},
                                       {"config_hash", header.config_hash},
                                       {"shards", path_strings(shards)},
                                       {"outputs", outputs},
                                       {"config", resolved}});
    return 0;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string model;  // "oracle" to score the Bayesian oracle itself
    std::vector<std::string> shards;
    std::string data;
    std::string out;
    bool oracle = false;
    bool keep_demos = false;
    std::string demos = "sweep";
    int samples = 1000;
    int oracle_samples = 2000;
    std::int64_t limit = 0;
    std::uint64_t seed = 0;
};

// "sweep" is 1..available, "all" is just `available`, otherwise one count.
std::vector<int> demo_counts(const std::string& spec, int available) {
    std::vector<int> out;
    if (spec == "sweep") {
        for (int k = 1; k <= available; ++k) out.push_back(k);
    } else if (spec == "all") {
        out.push_back(available);
    } else {
        int k = 0;
        try {
            k = std::stoi(spec);
        } catch (const std::exception&) {
            throw InputError("--demos must be sweep, all or a count, got " + spec);
        }
        if (k < 1) throw InputError("--demos count must be positive");
        if (k <= available) out.push_back(k);
    }
    return out;
}

void write_error_by_demos(const fs::path& path, const EvalReport& r) {
    std::ostringstream s;
    s << "demos,mean,std_error,count\n";
    for (const auto& [k, st] : r.by_demos) s << k << ',' << fmt(st.mean) << ',' << fmt(st.std_error) << ',' << st.count << '\n';
    write_text(path, s.str());
}

int cmd_eval(const EvalArgs& a) {
    const auto shards = collect_shards(a.shards, a.data);
    ShardHeader header;
    auto records = load_prompts(shards, &header);
    if (a.limit > 0 && static_cast<std::int64_t>(records.size()) > a.limit) records.resize(static_cast<std::size_t>(a.limit));
    if (records.empty()) {
        throw InputError("evaluation shards hold no records");
    }
    const FamilyConfig fc = FamilyConfig::from_json(header.family_config);
    const bool use_oracle_model = a.model == "oracle";
    if (!use_oracle_model && !a.model.empty()) {
        throw InputError("--model accepts only 'oracle'");
    }
    if (use_oracle_model == !a.checkpoint.empty()) {
        throw InputError("give exactly one of --checkpoint and --model oracle");
    }

    std::optional<Checkpoint> ckpt;
    std::string kind = "oracle";
    AugmentConfig augment;
    CodecConfig codec;
    if (!use_oracle_model) {
        ckpt = load_checkpoint(a.checkpoint);
        kind = ckpt->meta.value("kind", std::string("icon"));
        const std::string trained_on = ckpt->meta.value("family", std::string());
        if (!trained_on.empty() && trained_on != header.family) {
            throw ConfigError("checkpoint was trained on " + trained_on + " but the shards hold " + header.family);
        }
        if (kind == "icon") {
            const IconConfig c = icon_config_from_json(ckpt->meta.at("train_config"));
            augment = c.augment;
            codec = c.codec;
        } else if (kind == "genicon_generator") {
            const GanConfig c = gan_config_from_json(ckpt->meta.at("train_config"));
            augment = c.augment;
            codec = c.codec;
        } else {
            throw ConfigError("checkpoint kind '" + kind + "' cannot be evaluated");
        }
    }
    // Each record is evaluated at every requested demo count with its first k
    // demos. The model sees those demos thinned like its training prompts and
    // every query; the oracle conditions on the unthinned demos.
    if (a.keep_demos || use_oracle_model) augment.min_demo_points = augment.max_demo_points = 0;
    augment.min_queries = augment.max_queries = 0;
    std::vector<Prompt> full, prompts;
    Rng aug_rng(stream_seed(a.seed, 11));
    for (const auto& r : records) {
        const int available = static_cast<int>(r.demos.size());
        for (int k : demo_counts(a.demos, available)) {
            Prompt p = r;
            p.demos.resize(static_cast<std::size_t>(k));
            AugmentConfig thin = augment;
            thin.min_demos = thin.max_demos = k;
            prompts.push_back(augment_prompt(p, thin, aug_rng));
            full.push_back(std::move(p));
        }
    }
    if (prompts.empty()) {
        throw InputError("no prompt has the requested demo count");
    }

    const fs::path out(a.out);
    make_out_dir(out);
    const json resolved = {{"command", "eval"},
                           {"checkpoint", a.checkpoint},
                           {"model", use_oracle_model ? "oracle" : kind},
                           {"shards", path_strings(shards)},
                           {"oracle", a.oracle},
                           {"keep_demos", a.keep_demos},
                           {"demos", a.demos},
                           {"samples", a.samples},
                           {"oracle_samples", a.oracle_samples},
                           {"limit", a.limit},
                           {"seed", a.seed}};
    write_json(out / "config.json", resolved);

    const bool need_oracle = a.oracle || use_oracle_model;
    std::vector<std::optional<OracleResult>> oracles(full.size());
    std::int64_t oracle_failures = 0;
    if (need_oracle) {
        for (std::size_t i = 0; i < full.size(); ++i) {
            Rng rng(stream_seed(a.seed, 1000 + i));
            try {
                oracles[i] = mc_posterior_predictive(fc, full[i], a.oracle_samples, rng);
            } catch (const NumericalError& e) {
                ++oracle_failures;
                std::cerr << "oracle unavailable for record " << i << ": " << e.what() << "\n";
            }
        }
    }

    json report = {{"family", header.family}, {"model", resolved["model"]}, {"prompts", prompts.size()}};
    std::ostringstream pred_csv;
    if (kind == "genicon_generator") {
        pred_csv << "prompt,demos,x,mean,q05,q50,q95,truth" << (need_oracle ? ",oracle_mean,oracle_std" : "") << "\n";
        std::vector<std::vector<double>> means;
        std::vector<double> sigmas, oracle_err, oracle_ratio;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            Rng rng(stream_seed(a.seed, 2000 + i));
            const auto samples = generator_samples(ckpt->params, prompts[i], a.samples, rng, codec);
            const auto s = summarize_samples(prompts[i].query, samples, {0.05, 0.5, 0.95});
            means.push_back(s.mean);
            sigmas.push_back(s.sigma_hat);
            std::vector<double> om, os;
            if (oracles[i]) {
                om = oracles[i]->mean();
                os = oracles[i]->stddev();
                const auto m = compare_to_oracle(samples, *oracles[i]);
                oracle_err.push_back(m.mean_relative_error);
                if (std::isfinite(m.mean_std_ratio)) oracle_ratio.push_back(m.mean_std_ratio);
            }
            for (std::size_t k = 0; k < s.query.size(); ++k) {
                pred_csv << i << ',' << prompts[i].demos.size() << ',' << fmt(s.query[k]) << ',' << fmt(s.mean[k]) << ',' << fmt(s.quantiles[0][k]) << ','
                         << fmt(s.quantiles[1][k]) << ',' << fmt(s.quantiles[2][k]) << ',' << fmt(prompts[i].truth[k]);
                if (need_oracle) pred_csv << ',' << (om.empty() ? "" : fmt(om[k])) << ',' << (os.empty() ? "" : fmt(os[k]));
                pred_csv << '\n';
            }
        }
        const EvalReport r = evaluate(prompts, means, header.family);
        report["sample_mean"] = r.to_json();
        report["samples"] = a.samples;
        const ErrorStat sh = summarize(sigmas);
        report["sigma_hat"] = {{"mean", sh.mean}, {"std_error", sh.std_error}, {"count", sh.count}};
        if (need_oracle) {
            const ErrorStat e = summarize(oracle_err), q = summarize(oracle_ratio);
            report["oracle"] = {{"mean_relative_error", {{"mean", e.mean}, {"std_error", e.std_error}, {"count", e.count}}},
                                {"std_ratio", {{"mean", q.mean}, {"std_error", q.std_error}, {"count", q.count}}},
                                {"unavailable", oracle_failures}};
        }
        write_error_by_demos(out / "error_by_demos.csv", r);
        write_text(out / "bands.csv", pred_csv.str());
    } else {
        std::vector<std::vector<double>> preds;
        if (use_oracle_model) {
            for (std::size_t i = 0; i < prompts.size(); ++i) {
                if (!oracles[i]) throw NumericalError("oracle unavailable for record " + std::to_string(i));
                preds.push_back(oracles[i]->mean());
            }
        } else {
            preds = predict_all(ckpt->params, prompts, codec);
        }
        const EvalReport r = evaluate(prompts, preds, header.family);
        report["eval"] = r.to_json();
        pred_csv << "prompt,demos,x,prediction,truth" << (need_oracle ? ",oracle_mean" : "") << "\n";
        std::vector<double> oracle_err;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            std::vector<double> om;
            if (oracles[i]) {
                om = oracles[i]->mean();
                oracle_err.push_back(relative_error(preds[i], om));
            }
            for (std::size_t k = 0; k < preds[i].size(); ++k) {
                pred_csv << i << ',' << prompts[i].demos.size() << ',' << fmt(prompts[i].query[k]) << ','
                         << fmt(preds[i][k]) << ',' << fmt(prompts[i].truth[k]);
                if (need_oracle) pred_csv << ',' << (om.empty() ? "" : fmt(om[k]));
                pred_csv << '\n';
            }
        }
        if (need_oracle) {
            const ErrorStat e = summarize(oracle_err);
            report["oracle"] = {{"relative_error", {{"mean", e.mean}, {"std_error", e.std_error}, {"count", e.count}}},
                                {"unavailable", oracle_failures}};
        }
        write_error_by_demos(out / "error_by_demos.csv", r);
        write_text(out / "predictions.csv", pred_csv.str());
    }
    write_json(out / "report.json", report);
    write_json(out / "manifest.json", {{"tool", kToolVersion},
                                       {"command", "eval"},
                                       {"family", header.family},
                                       {"config_hash", header.config_hash},
                                       {"outputs", {"report.json", "error_by_demos.csv",
                                                    kind == "genicon_generator" ? "bands.csv" : "predictions.csv"}},
                                       {"config", resolved}});
    std::cout << report.dump(2) << "\n";
    return 0;
}

// ---- report -------------------------------------------------------------------

std::string cell(const json& j, std::initializer_list<const char*> path) {
    const json* cur = &j;
    for (const char* k : path) {
        if (!cur->is_object() || !cur->contains(k)) return "";
        cur = &cur->at(k);
    }
    if (cur->is_number()) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4g", cur->get<double>());
        return buf;
    }
    return cur->is_string() ? cur->get<std::string>() : cur->dump();
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_path) {
    if (dirs.empty()) {
        throw InputError("report needs at least one run directory");
    }
    std::ostringstream md;
    md << "# iconlab report\n\n";
    md << "## Regression runs\n\n| run | family | model | prompts | relative error | std error | vs oracle mean |\n"
       << "|---|---|---|---|---|---|---|\n";
    std::ostringstream gen;
    gen << "## Generative runs\n\n| run | family | samples | sigma_hat | sample-mean error | vs oracle mean | std ratio |\n"
        << "|---|---|---|---|---|---|---|\n";
    std::ostringstream other;
    other << "## Other runs\n\n| run | command | family | mode |\n|---|---|---|---|\n";
    int regression = 0, generative = 0, others = 0;
    for (const auto& d : dirs) {
        const fs::path dir(d);
        if (!fs::exists(dir / "manifest.json")) {
            std::cerr << "warning: skipping " << d << " (no manifest.json)\n";
            continue;
        }
        const json m = read_json(dir / "manifest.json");
        const std::string command = m.value("command", "");
        if (command == "eval" && fs::exists(dir / "report.json")) {
            const json r = read_json(dir / "report.json");
            if (r.contains("sigma_hat")) {
                gen << "| " << d << " | " << cell(r, {"family"}) << " | " << cell(r, {"samples"}) << " | "
                    << cell(r, {"sigma_hat", "mean"}) << " | " << cell(r, {"sample_mean", "relative_error", "mean"})
                    << " | " << cell(r, {"oracle", "mean_relative_error", "mean"}) << " | "
                    << cell(r, {"oracle", "std_ratio", "mean"}) << " |\n";
                ++generative;
            } else {
                md << "| " << d << " | " << cell(r, {"family"}) << " | " << cell(r, {"model"}) << " | "
                   << cell(r, {"prompts"}) << " | " << cell(r, {"eval", "relative_error", "mean"}) << " | "
                   << cell(r, {"eval", "relative_error", "std_error"}) << " | "
                   << cell(r, {"oracle", "relative_error", "mean"}) << " |\n";
                ++regression;
            }
        } else {
            other << "| " << d << " | " << command << " | " << m.value("family", "") << " | " << m.value("mode", "")
                  << " |\n";
            ++others;
        }
    }
    std::string text = md.str();
    if (regression == 0) text = "# iconlab report\n\n";
    if (generative > 0) text += "\n" + gen.str();
    if (others > 0) text += "\n" + other.str();
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_text(out_path, text);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-context operator learning experiments"};
    app.require_subcommand(1);

    DatagenArgs dg;
    auto* datagen = app.add_subcommand("datagen", "Generate prompt shards for one family");
    datagen->add_option("--config", dg.config, "JSON config file; flags override it");
    datagen->add_option("--family", dg.family, "ode2, ode3, reaction_diffusion, poisson_noisy, poisson_free_boundary");
    datagen->add_option("--count", dg.count, "Number of tasks (one prompt each unless --rotations)");
    datagen->add_option("--pairs", dg.pairs, "Number of hidden parameter draws");
    datagen->add_option("--per-pair", dg.per_pair, "Prompts per parameter draw");
    datagen->add_option("--J", dg.J, "Condition/QoI pairs per prompt, question included");
    datagen->add_option("--seed", dg.seed);
    datagen->add_option("--sigma", dg.sigma, "Observation noise level");
    datagen->add_option("--grid-points", dg.grid_points);
    datagen->add_option("--shard-size", dg.shard_size, "Records per shard file");
    datagen->add_flag("--rotations", dg.rotations, "One prompt per pair as the question");
    datagen->add_option("--out", dg.out, "Output directory")->required();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train an ICON or GenICON model");
    train->add_option("mode", tr.mode, "icon or genicon")->required()->check(CLI::IsMember({"icon", "genicon"}));
    train->add_option("--config", tr.config, "JSON config file; flags override it");
    train->add_option("--preset", tr.preset, "desk or reference")->check(CLI::IsMember({"desk", "reference"}));
    train->add_option("--shards", tr.shards, "Shard files");
    train->add_option("--data", tr.data, "Datagen output directory");
    train->add_option("--steps", tr.steps, "Training steps (generator steps for genicon)");
    train->add_option("--batch", tr.batch);
    train->add_option("--lr", tr.lr, "Peak learning rate");
    train->add_option("--ratio", tr.ratio, "Discriminator steps per generator step");
    train->add_option("--seed", tr.seed);
    train->add_option("--log-every", tr.log_every);
    train->add_option("--out", tr.out, "Output directory")->required();

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (or the oracle) on test shards");
    eval->add_option("--checkpoint", ev.checkpoint, "model.ckpt or generator.ckpt");
    eval->add_option("--model", ev.model, "'oracle' scores the Bayesian oracle as the model");
    eval->add_option("--shards", ev.shards, "Shard files");
    eval->add_option("--data", ev.data, "Datagen output directory");
    eval->add_flag("--oracle", ev.oracle, "Add oracle posterior-predictive comparisons");
    eval->add_flag("--keep-demos", ev.keep_demos, "Do not thin demo points");
    eval->add_option("--demos", ev.demos, "sweep (1..all), all, or a demo count");
    eval->add_option("--samples", ev.samples, "Generator samples per prompt")->check(CLI::Range(2, 1000000));
    eval->add_option("--oracle-samples", ev.oracle_samples)->check(CLI::Range(2, 10000000));
    eval->add_option("--limit", ev.limit, "Use at most this many records");
    eval->add_option("--seed", ev.seed);
    eval->add_option("--out", ev.out, "Output directory")->required();

    std::vector<std::string> report_dirs;
    std::string report_out;
    auto* report = app.add_subcommand("report", "Summarise run directories as markdown tables");
    report->add_option("dirs", report_dirs, "Run directories");
    report->add_option("--out", report_out, "Markdown file (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        if (*datagen) return cmd_datagen(dg);
        if (*train) return cmd_train(tr);
        if (*eval) return cmd_eval(ev);
        if (*report) return cmd_report(report_dirs, report_out);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
