#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "octfew/augment.hpp"
#include "octfew/manifest.hpp"

namespace octfew {

// How the real component of one class is resolved against the corpus.
enum class RealRule {
    none,    // no real component
    fixed,   // sample exactly real_count
    sample,  // sample (target - augmented - generated)
    all,     // take every available real record
};

struct ComponentRule {
    RealRule real = RealRule::none;
    int64_t real_count = 0;       // only for RealRule::fixed
    int64_t augmented = 0;        // exact count unless augmented_fill
    bool augmented_fill = false;  // augmented = target - real - generated
    int64_t generated = 0;
};

// A per-class composition recipe. target 0 means "native": the class ends
// at whatever its resolved components sum to (the Imb variants).
struct BalanceStrategy {
    std::string name;
    uint64_t seed = 0;
    std::map<ClassName, int64_t> targets;
    std::map<ClassName, ComponentRule> rules;

    void validate() const;
};

// Builtin recipes: imb_5000 (majors native, rares 2000 augmented + 3000
// generated), bal_5000 (majors 5000 sampled real, rares as above),
// bal_10000 (NORMAL/CNV/DME 10000 sampled, DRUSEN real topped up by
// augmentation, rares 2000 augmented + 8000 generated).
BalanceStrategy builtin_strategy(const std::string& name);

// Scales every target and fixed count by `factor` (desk-size runs).
BalanceStrategy scale_strategy(BalanceStrategy s, double factor);

struct ResolvedComponent {
    int64_t real = 0;
    int64_t augmented = 0;
    int64_t generated = 0;
    int64_t target() const { return real + augmented + generated; }
};

struct BalancePlan {
    BalanceStrategy strategy;
    std::map<ClassName, ResolvedComponent> ledger;
    std::map<ClassName, std::string> checkpoints;  // classes with generated > 0
};

// Resolves the strategy against the available corpus. Fails loudly rather
// than shrinking any component: missing checkpoints and real shortfalls
// are errors naming the class.
BalancePlan plan_balance(const DatasetManifest& real, const BalanceStrategy& strategy,
                         const std::map<ClassName, std::string>& checkpoints);

struct ExecutionContext {
    AugmentationSpec augment_spec;
    std::filesystem::path image_dir;  // destination for synthesized images
};

// Runs the plan: samples real records, synthesizes augmented/generated
// components via the augment and translation modules, and merges into one
// manifest whose per-class counts equal the ledger exactly.
DatasetManifest execute_plan(const BalancePlan& plan, const DatasetManifest& real,
                             const ExecutionContext& ctx);

}  // namespace octfew
