#include "blmrob/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "blmrob/rng.hpp"
#include "blmrob/util.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace blmrob::data {

const char* label_name(int label) {
    switch (label) {
        case kNoChanneling: return "no_channeling";
        case kPartialWell: return "partial_well";
        case kChanneling: return "channeling";
    }
    return "?";
}

void GenParams::validate() const {
    for (int c = 0; c < 2; ++c) {
        if (baseline[static_cast<size_t>(c)] <= 0.0)
            throw InvalidGenParams("baseline must be positive");
        if (noise_sigma[static_cast<size_t>(c)] < 0.0)
            throw InvalidGenParams("noise sigma must be non-negative");
    }
    if (common_amp < 0.0 || common_corr_len < 1)
        throw InvalidGenParams("bad common-mode parameters");
    if (dip_depth <= 0.0 || peak_height <= 0.0 || event_half_width < 1)
        throw InvalidGenParams("bad event shape parameters");
    if (partial_factor <= 0.0 || partial_factor >= 1.0)
        throw InvalidGenParams("partial_factor must be in (0,1)");
    if (amp_jitter < 0.0 || amp_jitter >= 1.0)
        throw InvalidGenParams("amp_jitter must be in [0,1)");
    // labels must be learnable: even the weakest scaled-down events clear the noise
    const double weakest = partial_factor * (1.0 - amp_jitter);
    if (dip_depth * weakest <= 5.0 * noise_sigma[0] ||
        peak_height * weakest <= 5.0 * noise_sigma[1])
        throw InvalidGenParams("event amplitudes must exceed 5x the noise sigma");
    // signals stay non-negative by construction
    const double floor0 = baseline[0] - dip_depth * (1.0 + amp_jitter) - std::abs(drift[0]) -
                          common_amp * baseline[0] - 6.0 * noise_sigma[0];
    if (floor0 <= 0.0)
        throw InvalidGenParams("channel 0 could go negative: shrink dip/noise or raise baseline");
}

ScanTrace generate_scan(const GenParams& params, uint64_t seed, int length) {
    params.validate();
    if (length < 2) throw InvalidGenParams("scan length must be >= 2");
    for (const Event& e : params.events)
        if (e.pos < 0 || e.pos >= length || e.half_width < 1)
            throw InvalidGenParams("event outside the scan");

    ScanTrace tr;
    tr.length = length;
    tr.seed = seed;
    tr.params = params;
    tr.events = params.events;
    tr.values = ad::Array({length, 2});

    // common-mode fluctuation: box-filtered white noise with ~unit std
    Rng rng(mix_seed(seed, 0x636f6dULL));
    std::vector<double> white(static_cast<size_t>(length + params.common_corr_len), 0.0);
    for (double& v : white) v = rng.normal();
    std::vector<double> common(static_cast<size_t>(length), 0.0);
    const double norm = std::sqrt(static_cast<double>(params.common_corr_len));
    for (int t = 0; t < length; ++t) {
        double acc = 0.0;
        for (int k = 0; k < params.common_corr_len; ++k)
            acc += white[static_cast<size_t>(t + k)];
        common[static_cast<size_t>(t)] = acc / norm;
    }

    Rng noise_rng(mix_seed(seed, 0x6e6f697365ULL));
    for (int t = 0; t < length; ++t) {
        const double frac = static_cast<double>(t) / (length - 1);
        for (int c = 0; c < 2; ++c) {
            double v = params.baseline[static_cast<size_t>(c)] +
                       params.drift[static_cast<size_t>(c)] * frac +
                       params.common_amp * params.baseline[static_cast<size_t>(c)] *
                           common[static_cast<size_t>(t)] +
                       params.noise_sigma[static_cast<size_t>(c)] * noise_rng.normal();
            tr.values(t, c) = v;
        }
    }

    for (const Event& e : params.events) {
        const double scale =
            e.amp * (e.kind == EventKind::Channeling ? 1.0 : params.partial_factor);
        const double width = static_cast<double>(e.half_width) / 2.0;
        for (int t = 0; t < length; ++t) {
            const double arg = (t - e.pos) / width;
            const double bump = std::exp(-0.5 * arg * arg);
            tr.values(t, 0) -= scale * params.dip_depth * bump;
            tr.values(t, 1) += scale * params.peak_height * bump;
        }
    }

    for (double v : tr.values.data)
        if (v < 0.0 || !std::isfinite(v))
            throw InvalidGenParams("generated trace left the valid range");
    return tr;
}

std::vector<LabeledWindow> label_windows(const ScanTrace& trace, int window_len, int stride,
                                         double coverage) {
    if (stride < 1) throw InvalidConfig("stride must be >= 1");
    if (trace.length < window_len) throw TraceTooShort("scan shorter than the window");
    std::vector<LabeledWindow> out;
    for (int origin = 0; origin + window_len <= trace.length; origin += stride) {
        int label = kNoChanneling;
        for (const Event& e : trace.events) {
            const int lo = e.pos - e.half_width;
            const int hi = e.pos + e.half_width;  // inclusive support
            const int support = hi - lo + 1;
            const int ov_lo = std::max(lo, origin);
            const int ov_hi = std::min(hi, origin + window_len - 1);
            const int overlap = std::max(0, ov_hi - ov_lo + 1);
            if (static_cast<double>(overlap) / support >= coverage) {
                const int cand = e.kind == EventKind::Channeling ? kChanneling : kPartialWell;
                label = std::max(label, cand);  // channeling > partial_well > none
            }
        }
        LabeledWindow lw;
        lw.window = pipeline::Window(ad::Array({window_len, 2}), origin);
        for (int t = 0; t < window_len; ++t)
            for (int c = 0; c < 2; ++c) lw.window.values(t, c) = trace.values(origin + t, c);
        lw.label = label;
        lw.trace_seed = trace.seed;
        out.push_back(std::move(lw));
    }
    return out;
}

void DatasetConfig::validate() const {
    if (n_scans < 3) throw InvalidConfig("need at least 3 scans");
    if (scan_len < window_len) throw InvalidConfig("scan shorter than the window");
    if (window_len < 2 || window_len > pipeline::kPadLen)
        throw InvalidConfig("window length out of range");
    if (stride < 1) throw InvalidConfig("stride must be >= 1");
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidSplit("split fractions must sum to 1");
    for (double f : fractions)
        if (f < 0.0) throw InvalidSplit("split fractions must be non-negative");
    gen.validate();
}

const std::vector<Dataset::Item>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ValidationError("unknown split: " + name);
}

std::vector<pipeline::Window> Dataset::windows_of(const std::vector<Item>& items) const {
    std::vector<pipeline::Window> out;
    out.reserve(items.size());
    const int w = config.window_len;
    for (const Item& it : items) {
        const ScanTrace& tr = scans.at(static_cast<size_t>(it.scan));
        ad::Array v({w, 2});
        for (int t = 0; t < w; ++t)
            for (int c = 0; c < 2; ++c) v(t, c) = tr.values(it.origin + t, c);
        out.emplace_back(std::move(v), it.origin);
    }
    return out;
}

std::vector<int> Dataset::labels_of(const std::vector<Item>& items) const {
    std::vector<int> out;
    out.reserve(items.size());
    for (const Item& it : items) out.push_back(it.label);
    return out;
}

namespace {

// scan kinds cycle so every split can hold all three classes
enum class ScanKind { Background, Partial, Channeling, Mixed };

std::vector<Event> scan_events(ScanKind kind, const DatasetConfig& cfg, Rng& rng) {
    const int hw = cfg.gen.event_half_width;
    const int margin = hw + 8;
    auto pos_at = [&](double lo_frac, double hi_frac) {
        const int lo = margin + static_cast<int>(lo_frac * (cfg.scan_len - 2 * margin));
        const int hi = margin + static_cast<int>(hi_frac * (cfg.scan_len - 2 * margin));
        return lo + rng.uniform_int(std::max(1, hi - lo));
    };
    auto amp = [&]() { return rng.uniform(1.0 - cfg.gen.amp_jitter, 1.0 + cfg.gen.amp_jitter); };
    std::vector<Event> ev;
    switch (kind) {
        case ScanKind::Background:
            break;
        case ScanKind::Partial:
            ev.push_back({EventKind::PartialWell, pos_at(0.1, 0.9), hw, amp()});
            break;
        case ScanKind::Channeling:
            ev.push_back({EventKind::Channeling, pos_at(0.1, 0.9), hw, amp()});
            break;
        case ScanKind::Mixed:
            ev.push_back({EventKind::PartialWell, pos_at(0.05, 0.35), hw, amp()});
            ev.push_back({EventKind::Channeling, pos_at(0.6, 0.9), hw, amp()});
            break;
    }
    return ev;
}

}  // namespace

Dataset make_dataset(const DatasetConfig& cfg, uint64_t seed) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.seed = seed;

    std::vector<int> kind_of(static_cast<size_t>(cfg.n_scans));
    for (int i = 0; i < cfg.n_scans; ++i) {
        const ScanKind kind = static_cast<ScanKind>(i % 4);
        kind_of[static_cast<size_t>(i)] = i % 4;
        Rng rng(mix_seed(seed, 0x7363616eULL + static_cast<uint64_t>(i)));
        GenParams gp = cfg.gen;
        gp.events = scan_events(kind, cfg, rng);
        ds.scans.push_back(
            generate_scan(gp, mix_seed(seed, static_cast<uint64_t>(i)), cfg.scan_len));
    }

    // stratified by scan kind: scans of each kind are dealt to splits by the
    // fractions via largest remainder (ties: test, then val); a scan never
    // spans splits
    std::array<std::vector<Dataset::Item>*, 3> targets = {&ds.train, &ds.val, &ds.test};
    for (int kind = 0; kind < 4; ++kind) {
        std::vector<int> scans_of_kind;
        for (int i = 0; i < cfg.n_scans; ++i)
            if (kind_of[static_cast<size_t>(i)] == kind) scans_of_kind.push_back(i);
        const int n = static_cast<int>(scans_of_kind.size());

        std::array<int, 3> count{};
        std::array<double, 3> remainder{};
        int assigned = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = cfg.fractions[static_cast<size_t>(s)] * n;
            count[static_cast<size_t>(s)] = static_cast<int>(std::floor(exact));
            remainder[static_cast<size_t>(s)] = exact - count[static_cast<size_t>(s)];
            assigned += count[static_cast<size_t>(s)];
        }
        const std::array<int, 3> priority = {2, 1, 0};  // test, val, train on ties
        while (assigned < n) {
            int best = priority[0];
            for (int s : priority)
                if (remainder[static_cast<size_t>(s)] > remainder[static_cast<size_t>(best)])
                    best = s;
            ++count[static_cast<size_t>(best)];
            remainder[static_cast<size_t>(best)] = -1.0;
            ++assigned;
        }

        int pos = 0;
        for (int s = 0; s < 3; ++s) {
            for (int k = 0; k < count[static_cast<size_t>(s)]; ++k, ++pos) {
                const int scan_idx = scans_of_kind[static_cast<size_t>(pos)];
                auto labeled = label_windows(ds.scans[static_cast<size_t>(scan_idx)],
                                             cfg.window_len, cfg.stride);
                for (const auto& lw : labeled)
                    targets[static_cast<size_t>(s)]->push_back(
                        {scan_idx, lw.window.origin, lw.label});
            }
        }
    }
    return ds;
}

Dataset make_dataset(int n_scans, uint64_t seed, int window_len,
                     const std::array<double, 3>& fractions) {
    DatasetConfig cfg;
    cfg.n_scans = n_scans;
    cfg.window_len = window_len;
    cfg.fractions = fractions;
    return make_dataset(cfg, seed);
}

// --- trace CSV ---------------------------------------------------------------

void write_trace(const ScanTrace& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "time_index,crystal_blm,secondary_blm\n";
    char buf[96];
    for (int t = 0; t < trace.length; ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", t, trace.values(t, 0),
                      trace.values(t, 1));
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path);
}

ScanTrace read_trace(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw FormatError(path + ": empty file");
    if (line != "time_index,crystal_blm,secondary_blm")
        throw FormatError(path + ": unexpected header: " + line);

    std::vector<double> values;
    int row = 1;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos ||
            line.find(',', c2 + 1) != std::string::npos)
            throw FormatError(path + ": row " + std::to_string(row) + ": expected 3 columns");
        try {
            values.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
            values.push_back(std::stod(line.substr(c2 + 1)));
        } catch (const std::exception&) {
            throw FormatError(path + ": row " + std::to_string(row) + ": bad number");
        }
    }
    if (values.empty()) throw FormatError(path + ": no data rows");

    ScanTrace tr;
    tr.length = static_cast<int>(values.size() / 2);
    tr.values = ad::Array({tr.length, 2}, std::move(values));
    return tr;
}

// --- dataset directory --------------------------------------------------------

namespace {

json gen_to_json(const GenParams& g) {
    return json{{"baseline", g.baseline},
                {"drift", g.drift},
                {"noise_sigma", g.noise_sigma},
                {"common_amp", g.common_amp},
                {"common_corr_len", g.common_corr_len},
                {"dip_depth", g.dip_depth},
                {"peak_height", g.peak_height},
                {"event_half_width", g.event_half_width},
                {"partial_factor", g.partial_factor},
                {"amp_jitter", g.amp_jitter}};
}

GenParams gen_from_json(const json& j) {
    GenParams g;
    j.at("baseline").get_to(g.baseline);
    j.at("drift").get_to(g.drift);
    j.at("noise_sigma").get_to(g.noise_sigma);
    j.at("common_amp").get_to(g.common_amp);
    j.at("common_corr_len").get_to(g.common_corr_len);
    j.at("dip_depth").get_to(g.dip_depth);
    j.at("peak_height").get_to(g.peak_height);
    j.at("event_half_width").get_to(g.event_half_width);
    j.at("partial_factor").get_to(g.partial_factor);
    j.at("amp_jitter").get_to(g.amp_jitter);
    return g;
}

json items_to_json(const std::vector<Dataset::Item>& items) {
    json arr = json::array();
    for (const auto& it : items) arr.push_back({it.scan, it.origin, it.label});
    return arr;
}

std::vector<Dataset::Item> items_from_json(const json& arr) {
    std::vector<Dataset::Item> out;
    for (const auto& row : arr) out.push_back({row.at(0), row.at(1), row.at(2)});
    return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "traces", ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

    json manifest;
    manifest["schema_version"] = 1;
    manifest["seed"] = ds.seed;
    manifest["n_scans"] = ds.config.n_scans;
    manifest["scan_len"] = ds.config.scan_len;
    manifest["window_len"] = ds.config.window_len;
    manifest["stride"] = ds.config.stride;
    manifest["fractions"] = ds.config.fractions;
    manifest["gen"] = gen_to_json(ds.config.gen);

    json scans = json::array();
    for (size_t i = 0; i < ds.scans.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "traces/scan_%03zu.csv", i);
        write_trace(ds.scans[i], (fs::path(dir) / name).string());
        json events = json::array();
        for (const Event& e : ds.scans[i].events)
            events.push_back({{"kind", e.kind == EventKind::Channeling ? "channeling" : "partial_well"},
                              {"pos", e.pos},
                              {"half_width", e.half_width},
                              {"amp", e.amp}});
        scans.push_back({{"index", i},
                         {"seed", ds.scans[i].seed},
                         {"trace", name},
                         {"events", events}});
    }
    manifest["scans"] = scans;
    manifest["splits"] = {{"train", items_to_json(ds.train)},
                          {"val", items_to_json(ds.val)},
                          {"test", items_to_json(ds.test)}};

    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot open manifest in " + dir);
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest: ") + e.what());
    }
    try {
        Dataset ds;
        ds.seed = manifest.at("seed");
        ds.config.n_scans = manifest.at("n_scans");
        ds.config.scan_len = manifest.at("scan_len");
        ds.config.window_len = manifest.at("window_len");
        ds.config.stride = manifest.at("stride");
        manifest.at("fractions").get_to(ds.config.fractions);
        ds.config.gen = gen_from_json(manifest.at("gen"));

        for (const auto& sj : manifest.at("scans")) {
            ScanTrace tr = read_trace((fs::path(dir) / sj.at("trace").get<std::string>()).string());
            tr.seed = sj.at("seed");
            tr.params = ds.config.gen;
            for (const auto& ej : sj.at("events")) {
                Event e;
                e.kind = ej.at("kind") == "channeling" ? EventKind::Channeling
                                                       : EventKind::PartialWell;
                e.pos = ej.at("pos");
                e.half_width = ej.at("half_width");
                e.amp = ej.at("amp");
                tr.events.push_back(e);
            }
            ds.scans.push_back(std::move(tr));
        }
        ds.train = items_from_json(manifest.at("splits").at("train"));
        ds.val = items_from_json(manifest.at("splits").at("val"));
        ds.test = items_from_json(manifest.at("splits").at("test"));
        return ds;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest: ") + e.what());
    }
}

std::string manifest_hash(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot open manifest in " + dir);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(buf.data(), buf.size()));
}

}  // namespace blmrob::data
