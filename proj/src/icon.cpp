#include "iconlab/icon.hpp"

#include "iconlab/checkpoint.hpp"
#include "iconlab/error.hpp"
#include "iconlab/parallel.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace iconlab {

// ---- augmentation -----------------------------------------------------------

void AugmentConfig::validate() const {
    if (min_demos < 0 || max_demos < min_demos) {
        throw ConfigError("demo range must satisfy 0 <= min_demos <= max_demos");
    }
    if (min_demo_points < 0 || (max_demo_points > 0 && max_demo_points < min_demo_points)) {
        throw ConfigError("invalid demo point range");
    }
    if (min_queries < 0 || (max_queries > 0 && max_queries < min_queries)) {
        throw ConfigError("invalid query range");
    }
}

namespace {

// Thinning count in [lo, hi] capped by n; lo = hi = 0 keeps all n.
int thin_count(int lo, int hi, int n, Rng& rng) {
    if (lo == 0 && hi == 0) {
        return n;
    }
    const int top = hi > 0 ? std::min(hi, n) : n;
    const int bottom = std::min(std::max(lo, 1), top);
    return rng.uniform_int(bottom, top);
}

std::vector<int> subset(int n, int k, Rng& rng) {
    if (k >= n) {
        std::vector<int> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    return rng.sample_without_replacement(n, k);
}

template <class V>
V pick(const V& v, const std::vector<int>& idx, std::size_t offset = 0) {
    V out;
    for (std::size_t i = 0; i < offset; ++i) out.push_back(v[i]);
    for (int i : idx) out.push_back(v[offset + static_cast<std::size_t>(i)]);
    return out;
}

std::size_t scalar_prefix(const Points& p) {
    std::size_t n = 0;
    while (n < p.size() && p.x[n] < 0.0) ++n;
    return n;
}

Demo thin_demo(const Demo& d, const AugmentConfig& c, Rng& rng) {
    const std::size_t s = scalar_prefix(d.cond);
    const int nc = static_cast<int>(d.cond.size() - s);
    const int nq = static_cast<int>(d.qoi.size());
    const bool shared = nc == nq && std::equal(d.qoi.x.begin(), d.qoi.x.end(), d.cond.x.begin() + static_cast<long>(s));
    Demo out;
    if (shared) {
        const int k = thin_count(c.min_demo_points, c.max_demo_points, nq, rng);
        const auto idx = subset(nq, k, rng);
        out.cond = {pick(d.cond.x, idx, s), pick(d.cond.v, idx, s)};
        out.qoi = {pick(d.qoi.x, idx), pick(d.qoi.v, idx)};
        return out;
    }
    const int kc = thin_count(c.min_demo_points, c.max_demo_points, nc, rng);
    const auto ic = subset(nc, kc, rng);
    const int kq = thin_count(c.min_demo_points, c.max_demo_points, nq, rng);
    const auto iq = subset(nq, kq, rng);
    out.cond = {pick(d.cond.x, ic, s), pick(d.cond.v, ic, s)};
    out.qoi = {pick(d.qoi.x, iq), pick(d.qoi.v, iq)};
    return out;
}

}  // namespace

Prompt augment_prompt(const Prompt& p, const AugmentConfig& c, Rng& rng) {
    Prompt out;
    const int available = static_cast<int>(p.demos.size());
    const int n = rng.uniform_int(std::min(c.min_demos, available), std::min(c.max_demos, available));
    for (int i : subset(available, n, rng)) {
        out.demos.push_back(thin_demo(p.demos[static_cast<std::size_t>(i)], c, rng));
    }
    out.question = p.question;
    const int nq = static_cast<int>(p.query.size());
    const auto iq = subset(nq, thin_count(c.min_queries, c.max_queries, nq, rng), rng);
    out.query = pick(p.query, iq);
    if (!p.truth.empty()) out.truth = pick(p.truth, iq);
    if (!p.clean.empty()) out.clean = pick(p.clean, iq);
    out.alpha = p.alpha;
    return out;
}

// ---- configuration ----------------------------------------------------------

IconConfig IconConfig::desk() {
    IconConfig c;
    c.model = TransformerConfig::desk();
    c.model.d_ff = 128;
    c.optim.peak_lr = 1e-3;
    c.optim.total_steps = 20000;
    c.optim.beta1 = 0.9;
    c.optim.beta2 = 0.9;
    c.batch_size = 8;
    c.augment.min_demo_points = 3;
    c.augment.max_demo_points = 13;
    c.augment.min_queries = 8;
    c.augment.max_queries = 51;
    return c;
}

IconConfig IconConfig::reference() {
    IconConfig c;
    c.model = TransformerConfig::reference();
    c.optim.total_steps = 100000;
    c.batch_size = 64;
    return c;
}

void IconConfig::validate() const {
    model.validate();
    optim.validate();
    augment.validate();
    if (model.d_token != kTokenWidth || model.d_out != 1 || model.has_latent()) {
        throw ConfigError("ICON needs d_token = 7, d_out = 1 and no latent tokens");
    }
    if (augment.max_demos > codec.j_max || augment.min_demos < 0) {
        throw ConfigError("demo range must lie within 0..j_max - 1");
    }
    if (batch_size <= 0 || checkpoint_every < 0) {
        throw ConfigError("batch_size must be positive and checkpoint_every non-negative");
    }
    if (codec.max_len > model.max_len) {
        throw ConfigError("codec max_len exceeds the model's positional table");
    }
}

nlohmann::json to_json(const IconConfig& c) {
    return {{"model", config_to_json(c.model)},
            {"optim", to_json(c.optim)},
            {"codec", {{"j_max", c.codec.j_max}, {"max_len", c.codec.max_len}}},
            {"augment",
             {{"min_demos", c.augment.min_demos},
              {"max_demos", c.augment.max_demos},
              {"min_demo_points", c.augment.min_demo_points},
              {"max_demo_points", c.augment.max_demo_points},
              {"min_queries", c.augment.min_queries},
              {"max_queries", c.augment.max_queries}}},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every}};
}

IconConfig icon_config_from_json(const nlohmann::json& j) {
    IconConfig c = IconConfig::desk();
    try {
        if (j.contains("model")) c.model = merge_config(j.at("model"), c.model);
        if (j.contains("optim")) c.optim = optim_config_from_json(j.at("optim"), c.optim);
        if (j.contains("codec")) {
            c.codec.j_max = j["codec"].value("j_max", c.codec.j_max);
            c.codec.max_len = j["codec"].value("max_len", c.codec.max_len);
        }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            c.augment.min_demos = a.value("min_demos", c.augment.min_demos);
            c.augment.max_demos = a.value("max_demos", c.augment.max_demos);
            c.augment.min_demo_points = a.value("min_demo_points", c.augment.min_demo_points);
            c.augment.max_demo_points = a.value("max_demo_points", c.augment.max_demo_points);
            c.augment.min_queries = a.value("min_queries", c.augment.min_queries);
            c.augment.max_queries = a.value("max_queries", c.augment.max_queries);
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad ICON config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- loss -------------------------------------------------------------------

PackedBatch pack_prompts(const std::vector<const Prompt*>& prompts, const CodecConfig& codec) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(prompts.size());
    std::int64_t total = 0;
    for (const Prompt* p : prompts) {
        seqs.push_back(encode_prompt(*p, codec));
        total += seqs.back().length();
    }
    PackedBatch b;
    b.tokens = Tensor::matrix(total, kTokenWidth);
    std::int64_t row = 0;
    for (const auto& s : seqs) {
        std::copy(s.tokens.data().begin(), s.tokens.data().end(), b.tokens.storage().begin() + row * kTokenWidth);
        for (auto q : s.query_rows) b.query_rows.push_back(row + q);
        b.query_counts.push_back(static_cast<std::int64_t>(s.query_rows.size()));
        b.layout.push_back({0, s.length()});
        row += s.length();
    }
    return b;
}

namespace {

struct LossGraph {
    ParamVars vars;
    ag::Var loss;
};

LossGraph build_loss(const ModelParams& params, const std::vector<const Prompt*>& batch, const CodecConfig& codec,
                     bool requires_grad) {
    if (batch.empty()) {
        throw ContractError("empty batch");
    }
    std::vector<double> truth;
    for (const Prompt* p : batch) {
        if (!p->has_truth() || p->truth.size() != p->query.size()) {
            throw ContractError("every prompt needs ground truth on its query grid");
        }
        if (p->query.empty()) {
            throw ContractError("prompt without query points");
        }
        truth.insert(truth.end(), p->truth.begin(), p->truth.end());
    }
    const PackedBatch packed = pack_prompts(batch, codec);
    LossGraph g;
    g.vars = make_param_vars(params, requires_grad);
    const auto fr = forward_packed(g.vars, params.config, ag::Var::constant(packed.tokens), ag::Var(), packed.layout);
    std::vector<std::int64_t> rows;
    rows.reserve(packed.query_rows.size());
    for (auto r : packed.query_rows) rows.push_back(fr.token_output_row[static_cast<std::size_t>(r)]);
    const ag::Var pred = ag::gather_rows(fr.output, rows);
    const ag::Var resid = ag::sub(pred, ag::Var::constant(Tensor::column(std::move(truth))));
    g.loss = ag::mean(ag::group_mean(ag::square(resid), packed.query_counts));
    return g;
}

}  // namespace

double icon_loss(const ModelParams& params, const std::vector<Prompt>& batch, const CodecConfig& codec) {
    std::vector<const Prompt*> ptrs;
    for (const auto& p : batch) ptrs.push_back(&p);
    return build_loss(params, ptrs, codec, false).loss.value()[0];
}

LossAndGrads icon_loss_and_grads(const ModelParams& params, const std::vector<const Prompt*>& batch,
                                 const CodecConfig& codec) {
    LossGraph g = build_loss(params, batch, codec, true);
    LossAndGrads out;
    out.loss = g.loss.value()[0];
    out.grads = backward(g.loss, g.vars, params.config);
    return out;
}

// ---- training ---------------------------------------------------------------

std::vector<Prompt> load_prompts(const std::vector<std::filesystem::path>& shards, ShardHeader* header) {
    if (shards.empty()) {
        throw ConfigError("no shards given");
    }
    std::vector<Prompt> all;
    ShardHeader first;
    for (std::size_t i = 0; i < shards.size(); ++i) {
        DatasetShard s = read_shard(shards[i]);
        if (i == 0) {
            first = s.header;
        } else if (s.header.family != first.family || s.header.config_hash != first.config_hash) {
            throw ConfigError("shard " + shards[i].string() + " has a different family or config hash");
        }
        for (auto& r : s.records) all.push_back(std::move(r));
    }
    if (header) {
        *header = first;
        header->count = static_cast<std::int64_t>(all.size());
    }
    return all;
}

namespace {

class TraceWriter {
public:
    explicit TraceWriter(const std::filesystem::path& path) {
        if (!path.empty()) {
            out_.open(path, std::ios::binary | std::ios::trunc);
            if (!out_) {
                throw IoError("cannot open loss trace " + path.string());
            }
            out_ << "step,lr,loss\n";
        }
    }
    void row(std::int64_t step, double lr, double loss) {
        if (!out_.is_open()) return;
        char buf[96];
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(step), lr, loss);
        out_ << buf;
    }
    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

nlohmann::json train_meta(const IconConfig& config, const TrainPaths& paths, std::int64_t step, double loss) {
    nlohmann::json m = paths.meta;
    m["kind"] = "icon";
    m["train_config"] = to_json(config);
    m["step"] = step;
    m["loss"] = loss;
    return m;
}

}  // namespace

TrainResult train_icon(const IconConfig& config, const std::vector<Prompt>& data, const TrainPaths& paths) {
    config.validate();
    if (data.empty()) {
        throw InputError("no training prompts");
    }
    Rng init_rng(stream_seed(config.seed, 0));
    Rng data_rng(stream_seed(config.seed, 1));
    TrainResult result;
    result.params = ModelParams::init(config.model, init_rng);
    OptimState opt = OptimState::init(result.params, config.optim);
    TraceWriter trace(paths.trace);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    std::vector<Prompt> batch(static_cast<std::size_t>(config.batch_size));
    std::vector<const Prompt*> ptrs;
    for (const auto& p : batch) ptrs.push_back(&p);

    const auto fail = [&](std::int64_t step, const std::string& what) {
        std::string where;
        if (!paths.checkpoint.empty()) {
            auto last = paths.checkpoint;
            last += ".last_finite";
            save_checkpoint(last, result.params, train_meta(config, paths, step - 1, result.losses.empty() ? 0.0 : result.losses.back()));
            where = "; last finite parameters in " + last.string();
        }
        trace.flush();
        throw NumericalError(what + where, step);
    };

    const std::int64_t total = config.optim.total_steps;
    for (std::int64_t step = 1; step <= total; ++step) {
        for (auto& slot : batch) {
            if (cursor == order.size()) {
                data_rng.shuffle(order);
                cursor = 0;
            }
            slot = augment_prompt(data[order[cursor++]], config.augment, data_rng);
        }
        LossAndGrads lg = icon_loss_and_grads(result.params, ptrs, config.codec);
        if (!std::isfinite(lg.loss)) {
            fail(step, "non-finite training loss");
        }
        clip_global_norm(lg.grads, config.optim.clip_norm);
        try {
            adamw_step(opt, result.params, lg.grads);
        } catch (const NumericalError&) {
            fail(step, "non-finite gradient");
        }
        result.losses.push_back(lg.loss);
        trace.row(step, lr_at(step, config.optim), lg.loss);
        if (paths.log && paths.log_every > 0 && step % paths.log_every == 0) {
            *paths.log << "step " << step << " loss " << lg.loss << std::endl;
        }
        if (!paths.checkpoint.empty() && config.checkpoint_every > 0 && step % config.checkpoint_every == 0 &&
            step < total) {
            save_checkpoint(paths.checkpoint, result.params, train_meta(config, paths, step, lg.loss));
            trace.flush();
        }
    }
    if (!paths.checkpoint.empty()) {
        save_checkpoint(paths.checkpoint, result.params, train_meta(config, paths, total, result.losses.back()));
    }
    trace.flush();
    return result;
}

TrainResult train_icon(const IconConfig& config, const std::vector<std::filesystem::path>& shards,
                       const TrainPaths& paths) {
    return train_icon(config, load_prompts(shards), paths);
}

// ---- prediction and evaluation ---------------------------------------------

namespace {

constexpr std::size_t kPredictChunk = 16;

std::vector<std::vector<double>> predict_chunk(const ModelParams& params, const ParamVars& vars,
                                               const std::vector<const Prompt*>& prompts, const CodecConfig& codec) {
    const PackedBatch packed = pack_prompts(prompts, codec);
    const auto fr = forward_packed(vars, params.config, ag::Var::constant(packed.tokens), ag::Var(), packed.layout);
    const Tensor& out = fr.output.value();
    std::vector<std::vector<double>> preds;
    std::size_t q = 0;
    for (auto count : packed.query_counts) {
        std::vector<double> v(static_cast<std::size_t>(count));
        for (auto& x : v) {
            x = out(fr.token_output_row[static_cast<std::size_t>(packed.query_rows[q++])], 0);
        }
        preds.push_back(std::move(v));
    }
    return preds;
}

}  // namespace

std::vector<double> predict(const ModelParams& params, const Prompt& prompt, const CodecConfig& codec) {
    const ParamVars vars = make_param_vars(params, false);
    return predict_chunk(params, vars, {&prompt}, codec).front();
}

std::vector<std::vector<double>> predict_all(const ModelParams& params, const std::vector<Prompt>& prompts,
                                             const CodecConfig& codec) {
    const ParamVars vars = make_param_vars(params, false);
    std::vector<std::vector<double>> out(prompts.size());
    const std::size_t chunks = (prompts.size() + kPredictChunk - 1) / kPredictChunk;
    parallel_for(chunks, [&](std::size_t c) {
        std::vector<const Prompt*> ptrs;
        const std::size_t end = std::min(prompts.size(), (c + 1) * kPredictChunk);
        for (std::size_t i = c * kPredictChunk; i < end; ++i) ptrs.push_back(&prompts[i]);
        auto preds = predict_chunk(params, vars, ptrs, codec);
        for (std::size_t i = 0; i < preds.size(); ++i) out[c * kPredictChunk + i] = std::move(preds[i]);
    });
    return out;
}

double relative_error(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size()) {
        throw ContractError("prediction and truth live on different grids");
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        den += truth[i] * truth[i];
    }
    if (!(den > 0.0)) {
        throw InputError("relative error against a zero-norm truth");
    }
    return std::sqrt(num / den);
}

ErrorStat summarize(const std::vector<double>& v) {
    ErrorStat s;
    s.count = static_cast<std::int64_t>(v.size());
    if (v.empty()) return s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std_error = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    }
    return s;
}

namespace {

nlohmann::json stat_json(const ErrorStat& s) {
    return {{"mean", s.mean}, {"std_error", s.std_error}, {"count", s.count}};
}

double mse(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j = {{"family", family}, {"relative_error", stat_json(relative_error)}};
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [k, s] : by_demos) per[std::to_string(k)] = stat_json(s);
    j["by_demos"] = per;
    if (clean_error) {
        j["clean_error"] = stat_json(*clean_error);
        j["denoising_gap"] = denoising_gap();
        j["mse_pred_clean"] = mse_pred_clean;
        j["mse_obs_clean"] = mse_obs_clean;
    }
    return j;
}

EvalReport evaluate(const std::vector<Prompt>& prompts, const std::vector<std::vector<double>>& predictions,
                    const std::string& family) {
    if (prompts.empty()) {
        throw InputError("empty test set");
    }
    if (predictions.size() != prompts.size()) {
        throw ContractError("one prediction per prompt required");
    }
    EvalReport r;
    r.family = family;
    std::vector<double> errs, clean_errs;
    std::map<int, std::vector<double>> per;
    double pred_clean = 0.0, obs_clean = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const Prompt& p = prompts[i];
        if (!p.has_truth()) {
            throw InputError("test prompt without ground truth");
        }
        const double e = relative_error(predictions[i], p.truth);
        errs.push_back(e);
        per[static_cast<int>(p.demos.size())].push_back(e);
        if (!p.clean.empty()) {
            clean_errs.push_back(relative_error(predictions[i], p.clean));
            pred_clean += mse(predictions[i], p.clean);
            obs_clean += mse(p.truth, p.clean);
        }
    }
    r.relative_error = summarize(errs);
    for (const auto& [k, v] : per) r.by_demos[k] = summarize(v);
    if (!clean_errs.empty()) {
        r.clean_error = summarize(clean_errs);
        r.mse_pred_clean = pred_clean / static_cast<double>(clean_errs.size());
        r.mse_obs_clean = obs_clean / static_cast<double>(clean_errs.size());
    }
    return r;
}

EvalReport evaluate(const std::vector<Prompt>& prompts, const Predictor& predictor, const std::string& family) {
    std::vector<std::vector<double>> preds(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) { preds[i] = predictor(prompts[i]); });
    return evaluate(prompts, preds, family);
}

EvalReport evaluate(const ModelParams& params, const std::vector<Prompt>& prompts, const std::string& family,
                    const CodecConfig& codec) {
    if (prompts.empty()) {
        throw InputError("empty test set");
    }
    return evaluate(prompts, predict_all(params, prompts, codec), family);
}

}  // namespace iconlab
