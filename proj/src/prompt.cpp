#include "iconlab/prompt.hpp"

#include "iconlab/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace iconlab {

std::int64_t encoded_length(const Prompt& p) {
    std::size_t n = p.question.size() + p.query.size();
    for (const auto& d : p.demos) {
        n += d.cond.size() + d.qoi.size();
    }
    return static_cast<std::int64_t>(n);
}

TokenSequence encode_prompt(const Prompt& p, const CodecConfig& config) {
    if (static_cast<int>(p.demos.size()) > config.j_max) {
        throw ConfigError("prompt has " + std::to_string(p.demos.size()) + " demos, more than j_max " +
                          std::to_string(config.j_max));
    }
    const std::int64_t n = encoded_length(p);
    if (n > config.max_len) {
        throw ConfigError("prompt needs " + std::to_string(n) + " tokens but max_len is " +
                          std::to_string(config.max_len) + "; truncate " + std::to_string(n - config.max_len) +
                          " tokens");
    }
    TokenSequence seq;
    seq.tokens = Tensor::matrix(n, kTokenWidth);
    seq.meta.reserve(static_cast<std::size_t>(n));
    std::int64_t row = 0;
    const auto put = [&](const Points& pts, Role role, int demo) {
        if (pts.x.size() != pts.v.size()) {
            throw ConfigError("observation coordinates and values differ in length");
        }
        for (std::size_t i = 0; i < pts.size(); ++i, ++row) {
            seq.tokens(row, 0) = pts.x[i];
            seq.tokens(row, 1) = pts.v[i];
            seq.tokens(row, 2 + static_cast<int>(role)) = 1.0;
            seq.tokens(row, 6) = static_cast<double>(demo) / config.j_max;
            seq.meta.push_back({role, demo, pts.x[i]});
        }
    };
    for (std::size_t d = 0; d < p.demos.size(); ++d) {
        put(p.demos[d].cond, Role::demo_cond, static_cast<int>(d + 1));
        put(p.demos[d].qoi, Role::demo_qoi, static_cast<int>(d + 1));
    }
    put(p.question, Role::question_cond, 0);
    for (double x : p.query) {
        seq.tokens(row, 0) = x;
        seq.tokens(row, 2 + static_cast<int>(Role::query)) = 1.0;
        seq.meta.push_back({Role::query, 0, x});
        seq.query_rows.push_back(row++);
    }
    if (!seq.tokens.all_finite()) {
        throw InputError("prompt contains non-finite values");
    }
    return seq;
}

Prompt decode_tokens(const TokenSequence& seq, const CodecConfig& config) {
    Prompt p;
    for (std::int64_t r = 0; r < seq.length(); ++r) {
        int role = -1;
        for (int k = 0; k < 4; ++k) {
            if (seq.tokens(r, 2 + k) == 1.0) {
                role = k;
            }
        }
        if (role < 0) {
            throw ContractError("token " + std::to_string(r) + " has no role");
        }
        const double x = seq.tokens(r, 0);
        const double v = seq.tokens(r, 1);
        const int demo = static_cast<int>(std::lround(seq.tokens(r, 6) * config.j_max));
        switch (static_cast<Role>(role)) {
            case Role::demo_cond:
            case Role::demo_qoi: {
                if (demo < 1) {
                    throw ContractError("demo token without a demo index");
                }
                if (static_cast<int>(p.demos.size()) < demo) {
                    p.demos.resize(static_cast<std::size_t>(demo));
                }
                Points& pts = role == 0 ? p.demos[demo - 1].cond : p.demos[demo - 1].qoi;
                pts.x.push_back(x);
                pts.v.push_back(v);
                break;
            }
            case Role::question_cond:
                p.question.x.push_back(x);
                p.question.v.push_back(v);
                break;
            case Role::query:
                p.query.push_back(x);
                break;
        }
    }
    return p;
}

std::vector<double> decode_prediction(const Tensor& out, std::size_t n_queries) {
    if (out.rows() != static_cast<std::int64_t>(n_queries)) {
        throw ContractError("expected " + std::to_string(n_queries) + " query rows, got " +
                            std::to_string(out.rows()));
    }
    std::vector<double> v(n_queries);
    for (std::size_t i = 0; i < n_queries; ++i) {
        v[i] = out(static_cast<std::int64_t>(i), 0);
    }
    return v;
}

namespace {

Points condition_points(const PairSample& p, const Grid& grid, bool full) {
    Points pts;
    for (std::size_t s = 0; s < p.cond_scalars.size(); ++s) {
        pts.x.push_back(-static_cast<double>(s + 1));
        pts.v.push_back(p.cond_scalars[s]);
    }
    if (!p.cond_field.empty()) {
        if (full) {
            pts.x.insert(pts.x.end(), grid.points.begin(), grid.points.end());
            pts.v.insert(pts.v.end(), p.cond_field.begin(), p.cond_field.end());
        } else {
            for (int i : p.cond_idx) {
                pts.x.push_back(grid.points[static_cast<std::size_t>(i)]);
                pts.v.push_back(p.cond_field[static_cast<std::size_t>(i)]);
            }
        }
    }
    return pts;
}

Points qoi_points(const PairSample& p, const Grid& grid) {
    Points pts;
    for (std::size_t k = 0; k < p.qoi_idx.size(); ++k) {
        pts.x.push_back(grid.points[static_cast<std::size_t>(p.qoi_idx[k])]);
        pts.v.push_back(p.qoi[k]);
    }
    return pts;
}

bool observations_are_noisy(const PairSample& p) {
    for (std::size_t k = 0; k < p.qoi_idx.size(); ++k) {
        if (p.qoi[k] != p.solution[static_cast<std::size_t>(p.qoi_idx[k])]) {
            return true;
        }
    }
    return false;
}

Prompt build_prompt(const TaskSample& task, const Grid& grid, std::size_t q, const std::vector<std::size_t>& demos,
                    bool full) {
    Prompt p;
    for (std::size_t d : demos) {
        p.demos.push_back({condition_points(task.pairs[d], grid, false), qoi_points(task.pairs[d], grid)});
    }
    const PairSample& qp = task.pairs[q];
    p.question = condition_points(qp, grid, full);
    if (full && !observations_are_noisy(qp)) {
        p.query = grid.points;
        p.truth = qp.solution;
    } else {
        const Points obs = qoi_points(qp, grid);
        p.query = obs.x;
        p.truth = obs.v;
        if (observations_are_noisy(qp)) {
            for (int i : qp.qoi_idx) p.clean.push_back(qp.solution[static_cast<std::size_t>(i)]);
        }
    }
    p.alpha = task.alpha;
    return p;
}

}  // namespace

std::vector<Prompt> make_prompts(const TaskSample& task, const Grid& grid, Rng& rng, const PromptOptions& options) {
    const std::size_t J = task.pairs.size();
    if (J == 0) {
        throw ConfigError("task has no condition/QoI pairs");
    }
    const std::size_t n_demos = options.demos < 0 ? J - 1 : static_cast<std::size_t>(options.demos);
    if (n_demos > J - 1) {
        throw ConfigError("asked for " + std::to_string(n_demos) + " demos from a task with " + std::to_string(J) +
                          " pairs");
    }
    std::vector<std::size_t> questions;
    if (options.rotations) {
        questions.resize(J);
        std::iota(questions.begin(), questions.end(), 0);
    } else {
        questions.push_back(J - 1);
    }
    std::vector<Prompt> out;
    out.reserve(questions.size());
    for (std::size_t q : questions) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < J; ++j) {
            if (j != q) others.push_back(j);
        }
        if (n_demos < others.size()) {
            const auto keep = rng.sample_without_replacement(static_cast<int>(others.size()), static_cast<int>(n_demos));
            std::vector<std::size_t> chosen;
            for (int k : keep) chosen.push_back(others[static_cast<std::size_t>(k)]);
            others = std::move(chosen);
        }
        out.push_back(build_prompt(task, grid, q, others, options.full_question));
    }
    return out;
}

// ---- shard IO ---------------------------------------------------------------

namespace {

void append_number(std::string& s, double v) {
    if (!std::isfinite(v)) {
        throw InputError("cannot serialise non-finite value");
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    s += buf;
}

void append_array(std::string& s, const std::vector<double>& v) {
    s += '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        append_number(s, v[i]);
    }
    s += ']';
}

void append_points(std::string& s, const Points& p, const char* coord) {
    s += "{\"";
    s += coord;
    s += "\":";
    append_array(s, p.x);
    s += ",\"v\":";
    append_array(s, p.v);
    s += '}';
}

Points points_from(const nlohmann::json& j, const char* coord) {
    Points p{j.at(coord).get<std::vector<double>>(), j.at("v").get<std::vector<double>>()};
    if (p.x.size() != p.v.size()) {
        throw IoError("coordinate and value arrays differ in length");
    }
    return p;
}

std::string header_line(const ShardHeader& h) {
    nlohmann::json j = {{"version", h.version},     {"family", h.family}, {"config_hash", h.config_hash},
                        {"J_max", h.j_max},         {"count", h.count},   {"family_config", h.family_config}};
    std::string s = j.dump();
    // grids are written with the same 17-digit formatting as records
    s.pop_back();
    s += ",\"grids\":";
    append_array(s, h.grid);
    s += '}';
    return s;
}

}  // namespace

std::string prompt_to_line(const Prompt& p) {
    std::string s = "{\"demos\":[";
    for (std::size_t d = 0; d < p.demos.size(); ++d) {
        if (d) s += ',';
        s += "{\"cond\":";
        append_points(s, p.demos[d].cond, "t");
        s += ",\"qoi\":";
        append_points(s, p.demos[d].qoi, "x");
        s += '}';
    }
    s += "],\"question\":";
    append_points(s, p.question, "t");
    s += ",\"query\":";
    append_array(s, p.query);
    s += ",\"truth\":";
    append_array(s, p.truth);
    if (!p.clean.empty()) {
        s += ",\"clean\":";
        append_array(s, p.clean);
    }
    if (!p.alpha.empty()) {
        s += ",\"alpha\":";
        append_array(s, p.alpha);
    }
    s += '}';
    return s;
}

Prompt prompt_from_json(const nlohmann::json& j) {
    Prompt p;
    for (const auto& d : j.at("demos")) {
        p.demos.push_back({points_from(d.at("cond"), "t"), points_from(d.at("qoi"), "x")});
    }
    p.question = points_from(j.at("question"), "t");
    p.query = j.at("query").get<std::vector<double>>();
    p.truth = j.at("truth").get<std::vector<double>>();
    if (!p.truth.empty() && p.truth.size() != p.query.size()) {
        throw IoError("truth and query lengths differ");
    }
    if (j.contains("clean")) {
        p.clean = j.at("clean").get<std::vector<double>>();
    }
    if (j.contains("alpha")) {
        p.alpha = j.at("alpha").get<std::vector<double>>();
    }
    return p;
}

void write_shard(const std::filesystem::path& path, const DatasetShard& shard) {
    if (shard.header.count != static_cast<std::int64_t>(shard.records.size())) {
        throw ContractError("shard header count does not match its records");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open shard for writing: " + path.string());
    }
    out << header_line(shard.header) << '\n';
    for (const auto& r : shard.records) {
        out << prompt_to_line(r) << '\n';
    }
    if (!out) {
        throw IoError("failed writing shard " + path.string());
    }
}

DatasetShard read_shard(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open shard " + path.string());
    }
    DatasetShard shard;
    std::string line;
    std::int64_t lineno = 0;
    if (!std::getline(in, line)) {
        throw IoError("shard " + path.string() + " is empty", 1);
    }
    ++lineno;
    try {
        const auto h = nlohmann::json::parse(line);
        shard.header.version = h.at("version").get<std::string>();
        if (shard.header.version != "icon-shard/1") {
            throw IoError("unsupported shard version '" + shard.header.version + "'", 1);
        }
        shard.header.family = h.at("family").get<std::string>();
        shard.header.config_hash = h.at("config_hash").get<std::string>();
        shard.header.j_max = h.at("J_max").get<int>();
        shard.header.grid = h.at("grids").get<std::vector<double>>();
        shard.header.count = h.at("count").get<std::int64_t>();
        shard.header.family_config = h.value("family_config", nlohmann::json{});
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed shard header in " + path.string() + ": " + e.what(), 1);
    }
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            shard.records.push_back(prompt_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed record in " + path.string() + ": " + e.what(), lineno);
        } catch (const IoError& e) {
            throw IoError(std::string(e.what()) + " in " + path.string(), lineno);
        }
    }
    if (static_cast<std::int64_t>(shard.records.size()) != shard.header.count) {
        throw IoError("integrity check failed for " + path.string() + ": header count " +
                      std::to_string(shard.header.count) + " but " + std::to_string(shard.records.size()) +
                      " records");
    }
    return shard;
}

}  // namespace iconlab
