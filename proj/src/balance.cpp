#include "octfew/balance.hpp"

#include <algorithm>
#include <cmath>

#include "octfew/gan.hpp"
#include "octfew/rng.hpp"

namespace octfew {

namespace fs = std::filesystem;

void BalanceStrategy::validate() const {
    if (name.empty()) throw std::runtime_error("BalanceStrategy: empty name");
    for (const auto& c : all_classes()) {
        if (!rules.count(c.name))
            throw std::runtime_error("BalanceStrategy '" + name + "': no rule for class " +
                                     class_name(c));
        auto it = targets.find(c.name);
        if (it != targets.end() && it->second < 0)
            throw std::runtime_error("BalanceStrategy: negative target for " + class_name(c));
        const auto& r = rules.at(c.name);
        if (r.augmented < 0 || r.generated < 0 || r.real_count < 0)
            throw std::runtime_error("BalanceStrategy: negative component for " + class_name(c));
    }
}

BalanceStrategy builtin_strategy(const std::string& name) {
    BalanceStrategy s;
    s.name = name;
    if (name == "imb_5000") {
        for (const auto& c : all_classes()) {
            if (c.is_major()) {
                s.targets[c.name] = 0;  // native count
                s.rules[c.name] = {RealRule::all, 0, 0, false, 0};
            } else {
                s.targets[c.name] = 5000;
                s.rules[c.name] = {RealRule::none, 0, 2000, false, 3000};
            }
        }
    } else if (name == "bal_5000") {
        for (const auto& c : all_classes()) {
            if (c.is_major()) {
                s.targets[c.name] = 5000;
                s.rules[c.name] = {RealRule::sample, 0, 0, false, 0};
            } else {
                s.targets[c.name] = 5000;
                s.rules[c.name] = {RealRule::none, 0, 2000, false, 3000};
            }
        }
    } else if (name == "bal_10000") {
        for (const auto& c : all_classes()) {
            s.targets[c.name] = 10000;
            if (c.name == ClassName::DRUSEN) {
                // Real corpus short of 10000: top up with augmentation.
                s.rules[c.name] = {RealRule::all, 0, 0, true, 0};
            } else if (c.is_major()) {
                s.rules[c.name] = {RealRule::sample, 0, 0, false, 0};
            } else {
                s.rules[c.name] = {RealRule::none, 0, 2000, false, 8000};
            }
        }
    } else if (name == "bal_500_desk") {
        // Desk-scale analogue of bal_5000. Majors keep all their (few
        // hundred) reals and top up by augmentation; rare classes keep
        // their real few-shot originals so real-only test partitions can
        // still measure rare TPR, with generation carrying the bulk.
        for (const auto& c : all_classes()) {
            s.targets[c.name] = 500;
            if (c.is_major())
                s.rules[c.name] = {RealRule::all, 0, 0, true, 0};
            else
                s.rules[c.name] = {RealRule::all, 0, 0, true, 300};
        }
    } else {
        throw std::runtime_error("unknown balance strategy: '" + name + "'");
    }
    s.validate();
    return s;
}

BalanceStrategy scale_strategy(BalanceStrategy s, double factor) {
    if (factor <= 0) throw std::runtime_error("scale_strategy: factor must be > 0");
    auto scale = [factor](int64_t v) {
        return static_cast<int64_t>(std::llround(static_cast<double>(v) * factor));
    };
    for (auto& [cls, t] : s.targets) t = scale(t);
    for (auto& [cls, r] : s.rules) {
        r.real_count = scale(r.real_count);
        r.augmented = scale(r.augmented);
        r.generated = scale(r.generated);
    }
    s.name += "@" + std::to_string(factor);
    return s;
}

BalancePlan plan_balance(const DatasetManifest& real, const BalanceStrategy& strategy,
                         const std::map<ClassName, std::string>& checkpoints) {
    strategy.validate();
    real.validate();

    std::map<ClassName, int64_t> avail;
    for (const auto& r : real.records)
        if (!r.is_synthetic()) ++avail[r.label.name];

    BalancePlan plan;
    plan.strategy = strategy;

    for (const auto& c : all_classes()) {
        const auto& rule = strategy.rules.at(c.name);
        const int64_t target = strategy.targets.count(c.name) ? strategy.targets.at(c.name) : 0;
        const int64_t have = avail.count(c.name) ? avail.at(c.name) : 0;

        ResolvedComponent rc;
        rc.generated = rule.generated;
        switch (rule.real) {
            case RealRule::none:
                rc.real = 0;
                break;
            case RealRule::all:
                rc.real = have;
                break;
            case RealRule::fixed:
                rc.real = rule.real_count;
                break;
            case RealRule::sample: {
                if (target <= 0)
                    throw std::runtime_error("plan_balance: class " + class_name(c) +
                                             " uses RealRule::sample without a target");
                const int64_t aug = rule.augmented_fill ? 0 : rule.augmented;
                rc.real = target - aug - rule.generated;
                break;
            }
        }
        if (rc.real < 0)
            throw std::runtime_error("plan_balance: class " + class_name(c) +
                                     " resolves to a negative real component");
        if (rc.real > have)
            throw std::runtime_error("plan_balance: class " + class_name(c) + " needs " +
                                     std::to_string(rc.real) + " real images but only " +
                                     std::to_string(have) + " available (short by " +
                                     std::to_string(rc.real - have) + ")");

        if (rule.augmented_fill) {
            if (target <= 0)
                throw std::runtime_error("plan_balance: class " + class_name(c) +
                                         " uses augmented_fill without a target");
            rc.augmented = target - rc.real - rc.generated;
            if (rc.augmented < 0)
                throw std::runtime_error("plan_balance: class " + class_name(c) +
                                         " overshoots its target before augmentation");
        } else {
            rc.augmented = rule.augmented;
        }

        if (rc.augmented > 0 && have < 1)
            throw std::runtime_error("plan_balance: class " + class_name(c) +
                                     " has no real images to augment from");
        if (rc.generated > 0) {
            auto it = checkpoints.find(c.name);
            if (it == checkpoints.end())
                throw std::runtime_error("plan_balance: missing translation checkpoint for class " +
                                         class_name(c));
            plan.checkpoints[c.name] = it->second;
        }
        if (target > 0 && rc.target() != target)
            throw std::runtime_error("plan_balance: class " + class_name(c) + " components sum to " +
                                     std::to_string(rc.target()) + ", target is " +
                                     std::to_string(target));
        plan.ledger[c.name] = rc;
    }

    // Generation translates normal images; the corpus must provide them.
    bool any_generated = false;
    for (const auto& [cls, rc] : plan.ledger) any_generated |= rc.generated > 0;
    if (any_generated && (!avail.count(ClassName::NORMAL) || avail.at(ClassName::NORMAL) < 1))
        throw std::runtime_error("plan_balance: generation requires real NORMAL images as sources");
    return plan;
}

DatasetManifest execute_plan(const BalancePlan& plan, const DatasetManifest& real,
                             const ExecutionContext& ctx) {
    const uint64_t seed = plan.strategy.seed;

    DatasetManifest domain_a;  // translation sources
    domain_a.created_at = real.created_at;
    for (const auto& r : real.records)
        if (!r.is_synthetic() && r.label.name == ClassName::NORMAL) domain_a.records.push_back(r);

    DatasetManifest out;
    out.global_seed = seed;
    out.created_at = now_iso8601();
    out.notes = "balance strategy " + plan.strategy.name;

    for (const auto& c : all_classes()) {
        const auto& rc = plan.ledger.at(c.name);
        const std::string cname = class_name(c);

        // Every real record of the class, in manifest order; the pool for
        // both the real component and augmentation sources.
        std::vector<ImageRecord> pool;
        for (const auto& r : real.records)
            if (!r.is_synthetic() && r.label.name == c.name) pool.push_back(r);

        if (rc.real > 0) {
            if (rc.real == static_cast<int64_t>(pool.size())) {
                for (const auto& r : pool) out.records.push_back(r);
            } else {
                DatasetManifest sampled =
                    sample_class(real, c, rc.real, derive_seed(seed, "real/" + cname));
                for (const auto& r : sampled.records) out.records.push_back(r);
            }
        }

        if (rc.augmented > 0) {
            auto expanded =
                augment_to_count(pool, static_cast<int64_t>(pool.size()) + rc.augmented,
                                 ctx.augment_spec, derive_seed(seed, "aug/" + cname),
                                 ctx.image_dir / cname);
            for (auto& r : expanded)
                if (r.provenance == Provenance::augmented) out.records.push_back(std::move(r));
        }

        if (rc.generated > 0) {
            const auto ckpt = gan::load_checkpoint(plan.checkpoints.at(c.name));
            if (ckpt.target_class.name != c.name)
                throw std::runtime_error("execute_plan: checkpoint for " + cname +
                                         " actually targets " + class_name(ckpt.target_class));
            DatasetManifest gen = gan::generate(ckpt, domain_a, rc.generated,
                                                derive_seed(seed, "gen/" + cname),
                                                ctx.image_dir / cname);
            for (auto& r : gen.records) out.records.push_back(std::move(r));
        }
    }

    // Id collisions between independently produced components are re-salted
    // with the plan seed; exactness of the ledger wins over id aesthetics.
    {
        std::set<std::string> seen;
        for (auto& r : out.records) {
            while (!seen.insert(r.id).second) {
                char salt[24];
                std::snprintf(salt, sizeof(salt), "~s%016llx",
                              static_cast<unsigned long long>(derive_seed(seed, r.id)));
                r.id += salt;
            }
        }
    }
    out.validate();

    // Zero-tolerance composition check against the ledger.
    std::map<ClassName, ResolvedComponent> got;
    for (const auto& r : out.records) {
        auto& g = got[r.label.name];
        if (r.provenance == Provenance::real) ++g.real;
        if (r.provenance == Provenance::augmented) ++g.augmented;
        if (r.provenance == Provenance::generated) ++g.generated;
    }
    for (const auto& c : all_classes()) {
        const auto& want = plan.ledger.at(c.name);
        const ResolvedComponent have = got.count(c.name) ? got.at(c.name) : ResolvedComponent{};
        if (have.real != want.real || have.augmented != want.augmented ||
            have.generated != want.generated)
            throw std::runtime_error(
                "execute_plan: composition mismatch for " + class_name(c) + ": got " +
                std::to_string(have.real) + "/" + std::to_string(have.augmented) + "/" +
                std::to_string(have.generated) + " (real/augmented/generated), ledger wants " +
                std::to_string(want.real) + "/" + std::to_string(want.augmented) + "/" +
                std::to_string(want.generated));
    }
    return out;
}

}  // namespace octfew
