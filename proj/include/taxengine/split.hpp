#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "taxengine/bundle.hpp"
#include "taxengine/rng.hpp"

namespace taxengine {

enum class Split : std::uint8_t { Train, Val, Test };

inline constexpr std::string_view split_name(Split s) noexcept
{
    switch (s) {
    case Split::Train: return "TRAIN";
    case Split::Val: return "VAL";
    case Split::Test: return "TEST";
    }
    return "?";
}

struct SplitFractions {
    double train = 0.64;
    double val = 0.16;
    double test = 0.20;
};

struct SplitAssignment {
    std::vector<Split> assignment;
    std::uint64_t seed = 0;

    std::vector<std::size_t> indices(Split which) const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < assignment.size(); ++i) {
            if (assignment[i] == which) {
                out.push_back(i);
            }
        }
        return out;
    }

    /// `id TAB TRAIN|VAL|TEST` per record.
    void save(const std::filesystem::path& file, std::span<const std::string> ids) const
    {
        if (ids.size() != assignment.size()) {
            fail(Errc::LengthMismatch, "split has " + std::to_string(assignment.size()) + " rows, ids " + std::to_string(ids.size()));
        }
        std::ofstream out(file, std::ios::binary);
        if (!out) {
            fail(Errc::Io, "cannot write " + file.string());
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            out << ids[i] << '\t' << split_name(assignment[i]) << '\n';
        }
    }
};

/// Stratified by full label path. Per stratum of size m: round(m * train)
/// records go to TRAIN, round(m * val) to VAL, the rest to TEST, so every
/// share lands within one record of its target and singletons train.
inline SplitAssignment stratified_split(std::span<const CategoryPath> labels, SplitFractions fractions, std::uint64_t seed)
{
    const double sum = fractions.train + fractions.val + fractions.test;
    if (!(fractions.train > 0 && fractions.val > 0 && fractions.test > 0) || std::abs(sum - 1.0) > 1e-9) {
        fail(Errc::InvalidConfig, "split fractions must be positive and sum to 1");
    }
    std::map<std::string, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        strata[labels[i].join()].push_back(i);
    }
    SplitAssignment out;
    out.seed = seed;
    out.assignment.assign(labels.size(), Split::Test);
    CounterRng rng(seed, fnv1a("stratified_split"));
    for (auto& [key, members] : strata) {
        rng.shuffle(std::span<std::size_t>(members));
        const auto m = static_cast<double>(members.size());
        const auto n_train = static_cast<std::size_t>(std::llround(m * fractions.train));
        auto n_val = static_cast<std::size_t>(std::llround(m * fractions.val));
        if (n_train + n_val > members.size()) {
            n_val = members.size() - n_train;
        }
        for (std::size_t j = 0; j < members.size(); ++j) {
            out.assignment[members[j]] = j < n_train ? Split::Train : (j < n_train + n_val ? Split::Val : Split::Test);
        }
    }
    return out;
}

inline SplitAssignment stratified_split(const EmbeddingBundle& bundle, SplitFractions fractions, std::uint64_t seed)
{
    return stratified_split(bundle.labels, fractions, seed);
}

} // namespace taxengine
