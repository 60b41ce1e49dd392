#include "iconlab/checkpoint.hpp"

#include "iconlab/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace iconlab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {
constexpr char kMagic[] = "ICONLAB-CKPT/1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

nlohmann::json config_to_json(const TransformerConfig& c) {
    return {{"d_token", c.d_token},   {"d_model", c.d_model}, {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},   {"d_ff", c.d_ff},       {"max_len", c.max_len},
            {"d_out", c.d_out},       {"latent_tokens", c.latent_tokens},
            {"latent_dim", c.latent_dim}, {"ln_eps", c.ln_eps}};
}

TransformerConfig config_from_json(const nlohmann::json& j) {
    TransformerConfig c;
    c.d_token = j.at("d_token").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.d_out = j.at("d_out").get<int>();
    c.latent_tokens = j.at("latent_tokens").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
    c.validate();
    return c;
}

TransformerConfig merge_config(const nlohmann::json& j, TransformerConfig c) {
    try {
        c.d_token = j.value("d_token", c.d_token);
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.max_len = j.value("max_len", c.max_len);
        c.d_out = j.value("d_out", c.d_out);
        c.latent_tokens = j.value("latent_tokens", c.latent_tokens);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.ln_eps = j.value("ln_eps", c.ln_eps);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const nlohmann::json& meta) {
    nlohmann::json header;
    header["config"] = config_to_json(params.config);
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    params.for_each([&](const std::string& name, const Tensor& t) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.size();
    });
    const std::string text = header.dump();
    const std::uint64_t len = text.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open checkpoint for writing: " + path.string());
    }
    out.write(kMagic, kMagicLen);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    params.for_each([&](const std::string&, const Tensor& t) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    char magic[kMagicLen];
    in.read(magic, kMagicLen);
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) {
        throw IoError("not an iconlab checkpoint: " + path.string());
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 26)) {
        throw IoError("corrupt checkpoint header in " + path.string());
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }

    Checkpoint ck;
    try {
        ck.params = ModelParams::zeros(config_from_json(header.at("config")));
        ck.meta = header.value("meta", nlohmann::json::object());
        const auto& tensors = header.at("tensors");
        std::size_t i = 0;
        ck.params.for_each([&](const std::string& name, Tensor& t) {
            if (i >= tensors.size() || tensors[i].at("name").get<std::string>() != name ||
                tensors[i].at("shape").get<Shape>() != t.shape()) {
                throw IoError("checkpoint tensor table does not match config at '" + name + "'");
            }
            ++i;
        });
        if (i != tensors.size()) {
            throw IoError("checkpoint lists extra tensors");
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint header missing fields: " + std::string(e.what()));
    } catch (const ConfigError& e) {
        throw IoError("checkpoint config invalid: " + std::string(e.what()));
    }
    ck.params.for_each([&](const std::string& name, Tensor& t) {
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) {
            throw IoError("checkpoint payload truncated at '" + name + "'");
        }
    });
    return ck;
}

}  // namespace iconlab
