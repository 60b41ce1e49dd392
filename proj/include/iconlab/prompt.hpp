#pragma once

#include "iconlab/rde.hpp"
#include "iconlab/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace iconlab {

/// Coordinate/value observations. Scalar conditions sit at negative
/// sentinel coordinates -1, -2, ... ahead of any field points.
struct Points {
    std::vector<double> x;
    std::vector<double> v;

    std::size_t size() const { return x.size(); }
    friend bool operator==(const Points&, const Points&) = default;
};

struct Demo {
    Points cond;
    Points qoi;
    friend bool operator==(const Demo&, const Demo&) = default;
};

struct Prompt {
    std::vector<Demo> demos;
    Points question;
    std::vector<double> query;
    std::vector<double> truth;  // empty when unknown
    std::vector<double> clean;  // noise-free truth, when the family is noisy
    std::vector<double> alpha;  // hidden parameters, never encoded

    bool has_truth() const { return !truth.empty(); }
    friend bool operator==(const Prompt&, const Prompt&) = default;
};

enum class Role { demo_cond = 0, demo_qoi = 1, question_cond = 2, query = 3 };

struct TokenMeta {
    Role role;
    int demo_index;  // 1-based for demo tokens, 0 otherwise
    double coordinate;
};

inline constexpr int kTokenWidth = 7;

struct CodecConfig {
    int j_max = 5;
    int max_len = 512;
};

/// One row per observed scalar: [coordinate, value, role one-hot (4), demo_index / j_max].
struct TokenSequence {
    Tensor tokens;
    std::vector<TokenMeta> meta;
    std::vector<std::int64_t> query_rows;

    std::int64_t length() const { return tokens.rows(); }
};

/// Throws ConfigError naming the excess when the sequence would exceed max_len.
TokenSequence encode_prompt(const Prompt& prompt, const CodecConfig& config = {});

/// Inverse of encode_prompt on the model-visible fields.
Prompt decode_tokens(const TokenSequence& seq, const CodecConfig& config = {});

/// Head outputs (one row per query token, first column used) to field values
/// in query order.
std::vector<double> decode_prediction(const Tensor& query_outputs, std::size_t n_queries);

std::int64_t encoded_length(const Prompt& prompt);

struct PromptOptions {
    bool rotations = false;  // one prompt per pair as question
    int demos = -1;          // demos per prompt; -1 means all remaining pairs
    bool full_question = true;
};

/// Splits a task into prompts. Demos never contain the question pair; α is
/// kept only in the oracle-only field.
std::vector<Prompt> make_prompts(const TaskSample& task, const Grid& grid, Rng& rng, const PromptOptions& options = {});

struct ShardHeader {
    std::string version = "icon-shard/1";
    std::string family;
    std::string config_hash;
    int j_max = 5;
    std::vector<double> grid;
    std::int64_t count = 0;
    nlohmann::json family_config;  // full generator config, for oracles

    friend bool operator==(const ShardHeader&, const ShardHeader&) = default;
};

struct DatasetShard {
    ShardHeader header;
    std::vector<Prompt> records;
};

void write_shard(const std::filesystem::path& path, const DatasetShard& shard);
/// Throws IoError with the offending line number on malformed input.
DatasetShard read_shard(const std::filesystem::path& path);

/// Serialised record line without the trailing newline.
std::string prompt_to_line(const Prompt& p);
Prompt prompt_from_json(const nlohmann::json& j);

}  // namespace iconlab
