#pragma once

#include "blmrob/attack.hpp"

namespace blmrob::training {

enum class TrainMode { Clean, AdvFinetune };

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.0;  // 0 = plain SGD
    uint64_t seed = 1;
    TrainMode mode = TrainMode::Clean;

    // adversarial fine-tuning only
    double adv_fraction = 0.5;  // fraction of each batch replaced by PGD examples
    attack::PgdConfig adv_pgd;
    threat::StructuredBudget budget;

    pipeline::NormConfig norm;
    int jobs = 0;  // parallelism for per-sample attack generation

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double val_acc = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    double final_val_acc = 0.0;
};

struct TrainResult {
    nn::ModelParams params;
    TrainLog log;
};

TrainResult train_clean(const nn::ModelParams& params0,
                        const std::vector<pipeline::Window>& train_windows,
                        const std::vector<int>& train_labels,
                        const std::vector<pipeline::Window>& val_windows,
                        const std::vector<int>& val_labels, const TrainConfig& cfg);

// Starts from a trained model; each batch replaces adv_fraction of its samples
// by signal-space wrapper PGD examples against the current weights (eval-mode
// statistics inside the attack), keeping the true labels.
TrainResult finetune_adversarial(const nn::ModelParams& params_clean,
                                 const std::vector<pipeline::Window>& train_windows,
                                 const std::vector<int>& train_labels,
                                 const std::vector<pipeline::Window>& val_windows,
                                 const std::vector<int>& val_labels, const TrainConfig& cfg);

}  // namespace blmrob::training
