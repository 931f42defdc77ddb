#include "d2dpo/denoiser.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace d2dpo {

using json = nlohmann::json;

int Architecture::layer_in(int layer) const {
    return layer == 0 ? input_width() : hidden[static_cast<std::size_t>(layer - 1)];
}

int Architecture::layer_out(int layer) const {
    return layer == num_layers() - 1 ? output_width() : hidden[static_cast<std::size_t>(layer)];
}

std::size_t Architecture::parameter_count() const {
    std::size_t n = 0;
    for (int l = 0; l < num_layers(); ++l) {
        n += static_cast<std::size_t>(layer_out(l)) * static_cast<std::size_t>(layer_in(l) + 1);
    }
    return n;
}

void Architecture::validate() const {
    if (num_dims < 1) {
        throw std::invalid_argument("Architecture: num_dims must be >= 1");
    }
    if (num_tokens < 2) {
        throw std::invalid_argument("Architecture: num_tokens must be >= 2");
    }
    for (int h : hidden) {
        if (h < 1) {
            throw std::invalid_argument("Architecture: hidden widths must be >= 1");
        }
    }
}

DenoiserParams::DenoiserParams(Architecture arch) : arch_(std::move(arch)) {
    arch_.validate();
    values_.assign(arch_.parameter_count(), 0.0);
}

DenoiserParams DenoiserParams::glorot(Architecture arch, Rng& rng) {
    DenoiserParams params(std::move(arch));
    for (int l = 0; l < params.arch().num_layers(); ++l) {
        const int fan_in = params.arch().layer_in(l);
        const int fan_out = params.arch().layer_out(l);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        auto w = params.weight(l);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = rng.uniform(-a, a);
        }
    }
    return params;
}

std::size_t DenoiserParams::weight_offset(int layer) const {
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l) {
        off += static_cast<std::size_t>(arch_.layer_out(l)) * static_cast<std::size_t>(arch_.layer_in(l) + 1);
    }
    return off;
}

std::size_t DenoiserParams::bias_offset(int layer) const {
    return weight_offset(layer) +
           static_cast<std::size_t>(arch_.layer_out(layer)) * static_cast<std::size_t>(arch_.layer_in(layer));
}

Eigen::Map<Eigen::MatrixXd> DenoiserParams::weight(int layer) {
    return {values_.data() + weight_offset(layer), arch_.layer_out(layer), arch_.layer_in(layer)};
}

Eigen::Map<const Eigen::MatrixXd> DenoiserParams::weight(int layer) const {
    return {values_.data() + weight_offset(layer), arch_.layer_out(layer), arch_.layer_in(layer)};
}

Eigen::Map<Eigen::VectorXd> DenoiserParams::bias(int layer) {
    return {values_.data() + bias_offset(layer), arch_.layer_out(layer)};
}

Eigen::Map<const Eigen::VectorXd> DenoiserParams::bias(int layer) const {
    return {values_.data() + bias_offset(layer), arch_.layer_out(layer)};
}

std::string DenoiserParams::block_name(std::size_t flat_index) const {
    for (int l = 0; l < arch_.num_layers(); ++l) {
        if (flat_index < bias_offset(l)) {
            return "layer" + std::to_string(l) + ".weight";
        }
        if (flat_index < weight_offset(l + 1)) {
            return "layer" + std::to_string(l) + ".bias";
        }
    }
    return "out_of_range";
}

bool DenoiserParams::all_finite() const {
    for (double v : values_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

void GradAccumulator::zero() {
    std::fill(values.begin(), values.end(), 0.0);
    scale = 1.0;
}

void GradAccumulator::add(const GradAccumulator& other) {
    if (other.values.size() != values.size()) {
        throw std::invalid_argument("GradAccumulator::add: shape mismatch");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = values[i] * scale + other.values[i] * other.scale;
    }
    scale = 1.0;
}

Eigen::MatrixXd encode_inputs(const Architecture& arch, std::span<const Sequence> xs, std::span<const double> times) {
    if (times.size() != 1 && times.size() != xs.size()) {
        throw std::invalid_argument("encode_inputs: need one time or one time per sequence");
    }
    const int symbols = arch.num_tokens + 1;
    Eigen::MatrixXd input = Eigen::MatrixXd::Zero(arch.input_width(), static_cast<Eigen::Index>(xs.size()));
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const Sequence& x = xs[b];
        if (static_cast<int>(x.size()) != arch.num_dims) {
            throw std::invalid_argument("encode_inputs: sequence length does not match the architecture");
        }
        const auto col = static_cast<Eigen::Index>(b);
        for (int d = 0; d < arch.num_dims; ++d) {
            const Token tok = x[static_cast<std::size_t>(d)];
            if (tok < 0 || tok >= symbols) {
                throw std::invalid_argument("encode_inputs: token outside the augmented alphabet");
            }
            input(d * symbols + tok, col) = 1.0;
        }
        const double t = times.size() == 1 ? times[0] : times[b];
        input(arch.num_dims * symbols, col) = t;
        input(arch.num_dims * symbols + 1, col) = 1.0 - t;
    }
    return input;
}

namespace {

void softmax_blocks(const Eigen::MatrixXd& logits, int num_tokens, Eigen::MatrixXd& probs) {
    probs.resize(logits.rows(), logits.cols());
    const Eigen::Index blocks = logits.rows() / num_tokens;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        for (Eigen::Index k = 0; k < blocks; ++k) {
            const auto z = logits.col(c).segment(k * num_tokens, num_tokens);
            const double zmax = z.maxCoeff();
            auto p = probs.col(c).segment(k * num_tokens, num_tokens);
            p = (z.array() - zmax).exp().matrix();
            p /= p.sum();
        }
    }
}

}  // namespace

ForwardCache forward_batch(const DenoiserParams& params, std::span<const Sequence> xs, std::span<const double> times) {
    const Architecture& arch = params.arch();
    ForwardCache cache;
    cache.input = encode_inputs(arch, xs, times);
    const Eigen::MatrixXd* h = &cache.input;
    const int last = arch.num_layers() - 1;
    cache.activations.reserve(static_cast<std::size_t>(last));
    for (int l = 0; l < last; ++l) {
        Eigen::MatrixXd a(arch.layer_out(l), h->cols());
        a.noalias() = params.weight(l) * *h;
        a.colwise() += params.bias(l);
        a = a.array().tanh().matrix();
        cache.activations.push_back(std::move(a));
        h = &cache.activations.back();
    }
    cache.logits.resize(arch.layer_out(last), h->cols());
    cache.logits.noalias() = params.weight(last) * *h;
    cache.logits.colwise() += params.bias(last);
    softmax_blocks(cache.logits, arch.num_tokens, cache.probs);
    return cache;
}

DenoiserOutput forward(const DenoiserParams& params, const Sequence& xt, double t) {
    const double times[1] = {t};
    ForwardCache cache = forward_batch(params, std::span<const Sequence>(&xt, 1), times);
    const int s = params.arch().num_tokens;
    const int d = params.arch().num_dims;
    DenoiserOutput out;
    out.logits = Eigen::Map<const Eigen::MatrixXd>(cache.logits.data(), s, d);
    out.probs = Eigen::Map<const Eigen::MatrixXd>(cache.probs.data(), s, d);
    return out;
}

GradAccumulator backward_batch(const DenoiserParams& params, const ForwardCache& cache,
                               const Eigen::Ref<const Eigen::MatrixXd>& dlogits) {
    const Architecture& arch = params.arch();
    if (dlogits.rows() != cache.logits.rows() || dlogits.cols() != cache.logits.cols()) {
        throw std::invalid_argument("backward_batch: logit gradient shape does not match the forward batch");
    }
    DenoiserParams grads(arch);
    Eigen::MatrixXd delta = dlogits;
    for (int l = arch.num_layers() - 1; l >= 0; --l) {
        const Eigen::MatrixXd& below = l == 0 ? cache.input : cache.activations[static_cast<std::size_t>(l - 1)];
        grads.weight(l).noalias() = delta * below.transpose();
        grads.bias(l) = delta.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd dh(below.rows(), below.cols());
            dh.noalias() = params.weight(l).transpose() * delta;
            delta = (dh.array() * (1.0 - below.array().square())).matrix();
        }
    }
    GradAccumulator out;
    out.values.assign(grads.values().begin(), grads.values().end());
    return out;
}

GradAccumulator backward(const DenoiserParams& params, const Sequence& xt, double t,
                         const Eigen::Ref<const Eigen::MatrixXd>& dlogits) {
    const Architecture& arch = params.arch();
    if (dlogits.rows() != arch.num_tokens || dlogits.cols() != arch.num_dims) {
        throw std::invalid_argument("backward: logit gradient must be S x D");
    }
    const double times[1] = {t};
    const ForwardCache cache = forward_batch(params, std::span<const Sequence>(&xt, 1), times);
    const Eigen::MatrixXd flat = dlogits.reshaped(arch.output_width(), 1);
    return backward_batch(params, cache, flat);
}

Eigen::MatrixXd softmax_backward(const Eigen::Ref<const Eigen::MatrixXd>& probs,
                                 const Eigen::Ref<const Eigen::MatrixXd>& dprobs) {
    if (probs.rows() != dprobs.rows() || probs.cols() != dprobs.cols()) {
        throw std::invalid_argument("softmax_backward: shape mismatch");
    }
    Eigen::MatrixXd out(probs.rows(), probs.cols());
    for (Eigen::Index d = 0; d < probs.cols(); ++d) {
        const double inner = probs.col(d).dot(dprobs.col(d));
        out.col(d) = (probs.col(d).array() * (dprobs.col(d).array() - inner)).matrix();
    }
    return out;
}

NonFiniteGradient::NonFiniteGradient(std::string block, std::size_t index)
    : std::runtime_error("non-finite gradient in " + block + " (flat index " + std::to_string(index) + ")"),
      block_(std::move(block)) {}

void optimizer_step(DenoiserParams& params, const GradAccumulator& grads, AdamState& state, const AdamHyper& hyper) {
    const std::size_t n = params.size();
    if (grads.values.size() != n) {
        throw std::invalid_argument("optimizer_step: gradient shape does not match parameters");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(grads.effective(i))) {
            throw NonFiniteGradient(params.block_name(i), i);
        }
    }
    if (state.m.size() != n) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
        state.step = 0;
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
    auto values = params.values();
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads.effective(i);
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        values[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
}

Eigen::MatrixXd MlpDenoiser::probabilities(std::span<const Sequence> xs, std::span<const double> times) const {
    return forward_batch(*params_, xs, times).probs;
}

Eigen::MatrixXd RefModel::probabilities(std::span<const Sequence> xs, std::span<const double> times) const {
    return forward_batch(*params_, xs, times).probs;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "d2dpo.checkpoint";

std::string checksum_hex(std::span<const double> values) {
    // FNV-1a over the IEEE-754 bit patterns.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : values) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int k = 0; k < 8; ++k) {
            h ^= (bits >> (8 * k)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace

std::string checkpoint_to_string(const DenoiserParams& params) {
    if (!params.all_finite()) {
        throw CheckpointError("refusing to write a checkpoint with non-finite parameters");
    }
    json doc;
    doc["format"] = kCheckpointFormat;
    doc["version"] = kCheckpointVersion;
    doc["architecture"] = {{"num_dims", params.arch().num_dims},
                           {"num_tokens", params.arch().num_tokens},
                           {"hidden", params.arch().hidden}};
    doc["params"] = std::vector<double>(params.values().begin(), params.values().end());
    doc["checksum"] = checksum_hex(params.values());
    return doc.dump() + "\n";
}

DenoiserParams checkpoint_from_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        if (doc.at("format").get<std::string>() != kCheckpointFormat) {
            throw CheckpointError("not a d2dpo checkpoint");
        }
        const int version = doc.at("version").get<int>();
        if (version != kCheckpointVersion) {
            throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
        }
        Architecture arch;
        const auto& a = doc.at("architecture");
        arch.num_dims = a.at("num_dims").get<int>();
        arch.num_tokens = a.at("num_tokens").get<int>();
        arch.hidden = a.at("hidden").get<std::vector<int>>();
        DenoiserParams params(arch);
        const auto values = doc.at("params").get<std::vector<double>>();
        if (values.size() != params.size()) {
            throw CheckpointError("checkpoint holds " + std::to_string(values.size()) + " parameters, architecture needs " +
                                  std::to_string(params.size()));
        }
        std::copy(values.begin(), values.end(), params.values().begin());
        if (doc.at("checksum").get<std::string>() != checksum_hex(params.values())) {
            throw CheckpointError("checkpoint checksum mismatch");
        }
        return params;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("invalid checkpoint architecture: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params) {
    const std::string text = checkpoint_to_string(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError("cannot open " + path.string() + " for writing");
    }
    out << text;
    if (!out) {
        throw CheckpointError("failed writing " + path.string());
    }
}

DenoiserParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_string(buf.str());
}

}  // namespace d2dpo
