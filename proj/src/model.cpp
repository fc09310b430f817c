#include "blmrob/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "blmrob/errors.hpp"

namespace blmrob::nn {

int ArchConfig::conv1_scaled() const {
    return static_cast<int>(std::llround(conv1_channels * scale_factor));
}

int ArchConfig::conv2_scaled() const {
    return static_cast<int>(std::llround(conv2_channels * scale_factor));
}

void ArchConfig::validate() const {
    if (input_len < 1) throw InvalidConfig("input_len must be positive");
    if (input_channels < 1) throw InvalidConfig("input_channels must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw InvalidConfig("kernel_size must be a positive odd integer");
    if (num_classes != 3) throw InvalidConfig("num_classes must be 3");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw InvalidConfig("dropout_rate must be in [0,1)");
    if (scale_factor <= 0.0) throw InvalidConfig("scale_factor must be positive");
    if (conv1_scaled() < 1 || conv2_scaled() < 1)
        throw InvalidConfig("scaled channel count must be at least 1");
    if (bn_momentum <= 0.0 || bn_momentum > 1.0)
        throw InvalidConfig("bn_momentum must be in (0,1]");
}

std::vector<std::pair<std::string, const ad::Array*>> ModelParams::named() const {
    return {
        {"conv1_w", &conv1_w},   {"conv1_b", &conv1_b},   {"bn1_gamma", &bn1_gamma},
        {"bn1_beta", &bn1_beta}, {"bn1_mean", &bn1_mean}, {"bn1_var", &bn1_var},
        {"conv2_w", &conv2_w},   {"conv2_b", &conv2_b},   {"bn2_gamma", &bn2_gamma},
        {"bn2_beta", &bn2_beta}, {"bn2_mean", &bn2_mean}, {"bn2_var", &bn2_var},
        {"dense_w", &dense_w},   {"dense_b", &dense_b},
    };
}

std::vector<std::pair<std::string, ad::Array*>> ModelParams::named() {
    std::vector<std::pair<std::string, ad::Array*>> out;
    for (auto& [name, arr] : static_cast<const ModelParams&>(*this).named())
        out.emplace_back(name, const_cast<ad::Array*>(arr));
    return out;
}

ModelParams build_model(const ArchConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int c1 = cfg.conv1_scaled();
    const int c2 = cfg.conv2_scaled();
    const int ci = cfg.input_channels;
    const int k = cfg.kernel_size;

    ModelParams p;
    p.cfg = cfg;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));

    auto he_normal = [&](std::vector<int> shape, int fan_in) {
        ad::Array a(std::move(shape));
        const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& v : a.data) v = rng.normal(0.0, std_dev);
        return a;
    };

    p.conv1_w = he_normal({c1, ci, k}, ci * k);
    p.conv1_b = ad::Array::zeros({c1});
    p.bn1_gamma = ad::Array::full({c1}, 1.0);
    p.bn1_beta = ad::Array::zeros({c1});
    p.bn1_mean = ad::Array::zeros({c1});
    p.bn1_var = ad::Array::full({c1}, 1.0);

    p.conv2_w = he_normal({c2, c1, k}, c1 * k);
    p.conv2_b = ad::Array::zeros({c2});
    p.bn2_gamma = ad::Array::full({c2}, 1.0);
    p.bn2_beta = ad::Array::zeros({c2});
    p.bn2_mean = ad::Array::zeros({c2});
    p.bn2_var = ad::Array::full({c2}, 1.0);

    ad::Array dw({c2, cfg.num_classes});
    const double dstd = std::sqrt(1.0 / static_cast<double>(c2));
    for (double& v : dw.data) v = rng.normal(0.0, dstd);
    p.dense_w = std::move(dw);
    p.dense_b = ad::Array::zeros({cfg.num_classes});
    return p;
}

namespace {

// Folds eval-mode batch norm into one scale/shift pair per channel.
void bn_eval_fold(const ad::Array& gamma, const ad::Array& beta, const ad::Array& mean,
                  const ad::Array& var, double eps, ad::Array& scale, ad::Array& shift) {
    const int c = gamma.shape[0];
    scale = ad::Array({c});
    shift = ad::Array({c});
    for (int i = 0; i < c; ++i) {
        const double s = gamma(i) / std::sqrt(var(i) + eps);
        scale(i) = s;
        shift(i) = beta(i) - mean(i) * s;
    }
}

}  // namespace

ForwardNodes append_forward_eval(ad::Graph& g, const ModelParams& p, ad::NodeId z) {
    const ArchConfig& cfg = p.cfg;
    ForwardNodes out;

    ad::Array s1, h1, s2, h2;
    bn_eval_fold(p.bn1_gamma, p.bn1_beta, p.bn1_mean, p.bn1_var, cfg.bn_eps, s1, h1);
    bn_eval_fold(p.bn2_gamma, p.bn2_beta, p.bn2_mean, p.bn2_var, cfg.bn_eps, s2, h2);

    auto c1 = g.conv1d(z, g.constant(p.conv1_w), g.constant(p.conv1_b));
    auto b1 = g.add_channel(g.mul_channel(c1, g.constant(s1)), g.constant(h1));
    out.relu_pre.push_back(b1);
    auto r1 = g.relu(b1);  // dropout is identity in eval mode

    auto c2 = g.conv1d(r1, g.constant(p.conv2_w), g.constant(p.conv2_b));
    auto b2 = g.add_channel(g.mul_channel(c2, g.constant(s2)), g.constant(h2));
    out.relu_pre.push_back(b2);
    auto r2 = g.relu(b2);

    auto pooled = g.gap_time(r2);
    out.logits = g.dense(pooled, g.constant(p.dense_w), g.constant(p.dense_b));
    return out;
}

TrainGraph build_train_graph(const ArchConfig& cfg, int batch, const std::vector<int>& labels,
                             bool freeze_bn) {
    cfg.validate();
    if (batch < 1) throw InvalidConfig("batch must be >= 1");
    if (static_cast<int>(labels.size()) != batch)
        throw InvalidConfig("labels size must equal batch");
    const int c1 = cfg.conv1_scaled();
    const int c2 = cfg.conv2_scaled();
    const int ci = cfg.input_channels;
    const int k = cfg.kernel_size;
    const int t = cfg.input_len;

    TrainGraph tg;
    ad::Graph& g = tg.g;
    tg.z = g.input({batch, t, ci});
    tg.drop1 = g.input({batch, t, c1});
    tg.drop2 = g.input({batch, t, c2});

    auto leaf = [&](const char* name, std::vector<int> shape) {
        ad::NodeId id = g.param(std::move(shape));
        tg.param_leaves.emplace_back(name, id);
        return id;
    };

    auto conv1_w = leaf("conv1_w", {c1, ci, k});
    auto conv1_b = leaf("conv1_b", {c1});
    auto bn1_gamma = leaf("bn1_gamma", {c1});
    auto bn1_beta = leaf("bn1_beta", {c1});
    auto conv2_w = leaf("conv2_w", {c2, c1, k});
    auto conv2_b = leaf("conv2_b", {c2});
    auto bn2_gamma = leaf("bn2_gamma", {c2});
    auto bn2_beta = leaf("bn2_beta", {c2});
    auto dense_w = leaf("dense_w", {c2, cfg.num_classes});
    auto dense_b = leaf("dense_b", {cfg.num_classes});

    // Frozen stats bind the running values; otherwise batch statistics are
    // part of the graph so gradients flow through them.
    ad::NodeId bn1_mean_in = -1, bn1_var_in = -1, bn2_mean_in = -1, bn2_var_in = -1;
    if (freeze_bn) {
        bn1_mean_in = leaf("bn1_mean", {c1});
        bn1_var_in = leaf("bn1_var", {c1});
        bn2_mean_in = leaf("bn2_mean", {c2});
        bn2_var_in = leaf("bn2_var", {c2});
    }

    auto batchnorm = [&](ad::NodeId x, int ch, ad::NodeId gamma, ad::NodeId beta,
                         ad::NodeId frozen_mean, ad::NodeId frozen_var, ad::NodeId* mean_out,
                         ad::NodeId* var_out) {
        ad::NodeId mean_id, var_id;
        if (freeze_bn) {
            mean_id = frozen_mean;
            var_id = frozen_var;
        } else {
            mean_id = g.channel_mean(x);
            auto centered0 = g.sub_channel(x, mean_id);
            var_id = g.channel_mean(g.mul(centered0, centered0));
        }
        *mean_out = mean_id;
        *var_out = var_id;
        auto sigma = g.sqrt(g.add(var_id, g.constant(ad::Array::full({ch}, cfg.bn_eps))));
        auto normed = g.div_channel(g.sub_channel(x, mean_id), sigma);
        return g.add_channel(g.mul_channel(normed, gamma), beta);
    };

    auto cv1 = g.conv1d(tg.z, conv1_w, conv1_b);
    auto bn1 = batchnorm(cv1, c1, bn1_gamma, bn1_beta, bn1_mean_in, bn1_var_in,
                         &tg.bn1_batch_mean, &tg.bn1_batch_var);
    auto r1 = g.mul(g.relu(bn1), tg.drop1);

    auto cv2 = g.conv1d(r1, conv2_w, conv2_b);
    auto bn2 = batchnorm(cv2, c2, bn2_gamma, bn2_beta, bn2_mean_in, bn2_var_in,
                         &tg.bn2_batch_mean, &tg.bn2_batch_var);
    auto r2 = g.mul(g.relu(bn2), tg.drop2);

    auto pooled = g.gap_time(r2);
    tg.logits = g.dense(pooled, dense_w, dense_b);
    tg.loss = g.cross_entropy(tg.logits, labels);
    g.set_output(tg.loss);
    return tg;
}

Logits forward_logits(const ModelParams& p, const ad::Array& z) {
    const ArchConfig& cfg = p.cfg;
    if (z.shape != std::vector<int>{cfg.input_len, cfg.input_channels})
        throw ShapeMismatch("forward_logits: z must be (" + std::to_string(cfg.input_len) + "," +
                            std::to_string(cfg.input_channels) + ")");
    ad::Graph g;
    auto zn = g.input({cfg.input_len, cfg.input_channels});
    auto fw = append_forward_eval(g, p, zn);
    g.set_output(fw.logits);  // not used for gradients here
    ad::Eval ev(g);
    const ad::Array& lv = ev.forward({{zn, &z}});
    Logits out;
    for (int i = 0; i < 3; ++i) out.v[static_cast<size_t>(i)] = lv(i);
    return out;
}

Logits forward_logits(ModelParams& p, const ad::Array& z, ForwardMode mode, Rng* rng) {
    if (mode == ForwardMode::Eval) return forward_logits(p, z);

    const ArchConfig& cfg = p.cfg;
    if (z.shape != std::vector<int>{cfg.input_len, cfg.input_channels})
        throw ShapeMismatch("forward_logits: bad input shape");
    const int c1 = cfg.conv1_scaled();
    const int c2 = cfg.conv2_scaled();

    TrainGraph tg = build_train_graph(cfg, 1, {0}, false);
    ad::Array zb({1, cfg.input_len, cfg.input_channels});
    zb.data = z.data;

    auto mask = [&](int ch) {
        ad::Array m({1, cfg.input_len, ch});
        const double keep = 1.0 - cfg.dropout_rate;
        for (double& v : m.data) {
            const bool kept = cfg.dropout_rate == 0.0 || (rng && rng->uniform() >= cfg.dropout_rate);
            v = kept ? 1.0 / keep : 0.0;
        }
        return m;
    };
    ad::Array m1 = mask(c1);
    ad::Array m2 = mask(c2);

    ad::Bindings b = {{tg.z, &zb}, {tg.drop1, &m1}, {tg.drop2, &m2}};
    auto by_name = p.named();
    for (const auto& [name, id] : tg.param_leaves) {
        for (auto& [pname, arr] : by_name)
            if (pname == name) b.emplace_back(id, arr);
    }
    ad::Eval ev(tg.g);
    ev.forward(b);

    // running statistics update: new = (1-m)*old + m*batch
    const double m = cfg.bn_momentum;
    auto update = [&](ad::Array& run, const ad::Array& batch_stat) {
        for (size_t i = 0; i < run.data.size(); ++i)
            run.data[i] = (1.0 - m) * run.data[i] + m * batch_stat.data[i];
    };
    update(p.bn1_mean, ev.value(tg.bn1_batch_mean));
    update(p.bn1_var, ev.value(tg.bn1_batch_var));
    update(p.bn2_mean, ev.value(tg.bn2_batch_mean));
    update(p.bn2_var, ev.value(tg.bn2_batch_var));

    const ad::Array& lv = ev.value(tg.logits);
    Logits out;
    for (int i = 0; i < 3; ++i) out.v[static_cast<size_t>(i)] = lv(0, i);
    return out;
}

// ---------------------------------------------------------------------------
// Weight container: "BLMW" magic, u32 version, arch header, then the named
// arrays in a fixed order. All integers u32, all floats f64, little-endian.

namespace {

constexpr char kMagic[4] = {'B', 'L', 'M', 'W'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_f64(std::string& s, double v) { s.append(reinterpret_cast<const char*>(&v), 8); }

struct Cursor {
    const std::string& buf;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > buf.size()) throw FormatError("weight file truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
};

}  // namespace

std::string encode_weights(const ModelParams& p) {
    std::string s;
    s.append(kMagic, 4);
    put_u32(s, kVersion);
    const ArchConfig& c = p.cfg;
    put_u32(s, static_cast<uint32_t>(c.input_len));
    put_u32(s, static_cast<uint32_t>(c.input_channels));
    put_u32(s, static_cast<uint32_t>(c.conv1_channels));
    put_u32(s, static_cast<uint32_t>(c.conv2_channels));
    put_u32(s, static_cast<uint32_t>(c.kernel_size));
    put_u32(s, static_cast<uint32_t>(c.num_classes));
    put_f64(s, c.dropout_rate);
    put_f64(s, c.scale_factor);
    put_f64(s, c.bn_momentum);
    put_f64(s, c.bn_eps);

    auto named = p.named();
    put_u32(s, static_cast<uint32_t>(named.size()));
    for (const auto& [name, arr] : named) {
        put_u32(s, static_cast<uint32_t>(name.size()));
        s.append(name);
        put_u32(s, static_cast<uint32_t>(arr->shape.size()));
        for (int d : arr->shape) put_u32(s, static_cast<uint32_t>(d));
        for (double v : arr->data) put_f64(s, v);
    }
    return s;
}

ModelParams decode_weights(const std::string& buf) {
    Cursor c{buf};
    c.need(4);
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("bad magic");
    c.pos = 4;
    if (c.u32() != kVersion) throw FormatError("unsupported weight file version");

    ArchConfig cfg;
    cfg.input_len = static_cast<int>(c.u32());
    cfg.input_channels = static_cast<int>(c.u32());
    cfg.conv1_channels = static_cast<int>(c.u32());
    cfg.conv2_channels = static_cast<int>(c.u32());
    cfg.kernel_size = static_cast<int>(c.u32());
    cfg.num_classes = static_cast<int>(c.u32());
    cfg.dropout_rate = c.f64();
    cfg.scale_factor = c.f64();
    cfg.bn_momentum = c.f64();
    cfg.bn_eps = c.f64();
    try {
        cfg.validate();
    } catch (const InvalidConfig& e) {
        throw FormatError(std::string("invalid arch header: ") + e.what());
    }

    ModelParams p = build_model(cfg, 0);  // gives the expected shapes
    auto named = p.named();
    const uint32_t count = c.u32();
    if (count != named.size()) throw FormatError("unexpected array count");
    for (auto& [name, arr] : named) {
        const uint32_t nlen = c.u32();
        c.need(nlen);
        if (buf.compare(c.pos, nlen, name) != 0) throw FormatError("unexpected array name");
        c.pos += nlen;
        const uint32_t rank = c.u32();
        std::vector<int> shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(c.u32());
        if (shape != arr->shape)
            throw FormatError("array " + name + " has shape " + ad::shape_str(shape) +
                              ", header implies " + ad::shape_str(arr->shape));
        for (double& v : arr->data) v = c.f64();
        if (!arr->all_finite()) throw FormatError("array " + name + " contains non-finite values");
    }
    if (c.pos != buf.size()) throw FormatError("trailing bytes in weight file");
    for (double v : p.bn1_var.data)
        if (v <= 0.0) throw FormatError("bn1_var must be strictly positive");
    for (double v : p.bn2_var.data)
        if (v <= 0.0) throw FormatError("bn2_var must be strictly positive");
    return p;
}

void save_weights(const ModelParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    const std::string buf = encode_weights(p);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

ModelParams load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_weights(buf);
}

}  // namespace blmrob::nn
