#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "blmrob/pipeline.hpp"

namespace blmrob::data {

// class indices
constexpr int kNoChanneling = 0;
constexpr int kPartialWell = 1;
constexpr int kChanneling = 2;

const char* label_name(int label);

enum class EventKind { Channeling, PartialWell };

struct Event {
    EventKind kind = EventKind::Channeling;
    int pos = 0;          // center sample
    int half_width = 24;  // support is [pos - half_width, pos + half_width]
    double amp = 1.0;     // per-event amplitude scale (weak channeling events
                          // sit near strong partial wells, like real scans)
};

// Two-channel scan phenomenology: smooth baseline with drift, channel-scaled
// common-mode fluctuation, iid readout noise, and Gaussian dip/peak pairs at
// events (crystal losses drop, absorber losses spike).
struct GenParams {
    std::array<double, 2> baseline{1.0, 0.8};
    std::array<double, 2> drift{-0.05, 0.04};        // total change over the scan
    std::array<double, 2> noise_sigma{0.012, 0.012};
    double common_amp = 0.02;                        // fraction of channel baseline
    int common_corr_len = 25;
    double dip_depth = 0.35;   // channel 0 at a channeling event
    double peak_height = 0.5;  // channel 1 at a channeling event
    int event_half_width = 24;
    double partial_factor = 0.4;   // partial-well events scale dip/peak by this
    double amp_jitter = 0.35;      // events draw amp from [1-j, 1+j]
    std::vector<Event> events;

    void validate() const;  // throws InvalidGenParams
};

struct ScanTrace {
    ad::Array values;  // (L,2), non-negative
    int length = 0;
    uint64_t seed = 0;
    GenParams params;
    std::vector<Event> events;  // annotations actually applied
};

ScanTrace generate_scan(const GenParams& params, uint64_t seed, int length);

struct LabeledWindow {
    pipeline::Window window;
    int label = kNoChanneling;
    int scan_index = 0;
    uint64_t trace_seed = 0;
};

// A window is labeled by an event kind when it covers at least
// `coverage` (default 60%) of that event's support; channeling wins ties,
// then partial well.
std::vector<LabeledWindow> label_windows(const ScanTrace& trace, int window_len, int stride = 1,
                                         double coverage = 0.6);

struct DatasetConfig {
    int n_scans = 36;
    int scan_len = 400;
    int window_len = 160;
    int stride = 6;  // defaults put the test split near 300 windows
    std::array<double, 3> fractions{0.7, 0.15, 0.15};  // train/val/test, by scan
    GenParams gen;

    void validate() const;
};

struct Dataset {
    DatasetConfig config;
    uint64_t seed = 0;
    std::vector<ScanTrace> scans;
    struct Item {
        int scan = 0;
        int origin = 0;
        int label = 0;
    };
    std::vector<Item> train, val, test;

    const std::vector<Item>& split(const std::string& name) const;
    std::vector<pipeline::Window> windows_of(const std::vector<Item>& items) const;
    std::vector<int> labels_of(const std::vector<Item>& items) const;
};

Dataset make_dataset(const DatasetConfig& cfg, uint64_t seed);
Dataset make_dataset(int n_scans, uint64_t seed, int window_len,
                     const std::array<double, 3>& fractions);

// Trace CSV: header "time_index,crystal_blm,secondary_blm", 17 significant
// digits (lossless double round trip).
void write_trace(const ScanTrace& trace, const std::string& path);
ScanTrace read_trace(const std::string& path);

// Dataset directory: manifest.json + traces/scan_<k>.csv.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

std::string manifest_hash(const std::string& dir);

}  // namespace blmrob::data
