#pragma once

#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xmtl/error.hpp"

namespace xmtl {

// Operation counts of an optimal unit-cost alignment. total is the
// Levenshtein distance and is unique; the S/I/D split follows a fixed
// backtrace tie-break (substitution > deletion > insertion) so it is
// deterministic as well.
struct EditOps {
    std::size_t substitutions = 0;
    std::size_t insertions = 0;
    std::size_t deletions = 0;
    std::size_t total() const { return substitutions + insertions + deletions; }
};

namespace detail {

template <typename Seq>
EditOps edit_distance_impl(const Seq& d, const Seq& g) {
    const std::size_t r = d.size(), z = g.size();
    // dist[i][j] = distance between d[0..i) and g[0..j)
    std::vector<std::size_t> dist((r + 1) * (z + 1));
    auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dist[i * (z + 1) + j]; };
    for (std::size_t i = 0; i <= r; ++i) at(i, 0) = i;
    for (std::size_t j = 0; j <= z; ++j) at(0, j) = j;
    for (std::size_t i = 1; i <= r; ++i) {
        for (std::size_t j = 1; j <= z; ++j) {
            const std::size_t sub = at(i - 1, j - 1) + (d[i - 1] == g[j - 1] ? 0 : 1);
            const std::size_t del = at(i - 1, j) + 1;
            const std::size_t ins = at(i, j - 1) + 1;
            at(i, j) = std::min({sub, del, ins});
        }
    }

    EditOps ops;
    std::size_t i = r, j = z;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 &&
            at(i, j) == at(i - 1, j - 1) + (d[i - 1] == g[j - 1] ? 0 : 1)) {
            if (d[i - 1] != g[j - 1]) ++ops.substitutions;
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++ops.deletions;
            --i;
        } else {
            ++ops.insertions;
            --j;
        }
    }
    return ops;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::istringstream ss{std::string(text)};
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

}  // namespace detail

template <typename T>
EditOps edit_distance(const std::vector<T>& d, const std::vector<T>& g) {
    return detail::edit_distance_impl(d, g);
}

inline EditOps edit_distance(std::string_view d, std::string_view g) {
    return detail::edit_distance_impl(d, g);
}

// Substitution-only distance: Hamming distance for equal lengths, empty
// otherwise. Sequences of different length have no substitution-only
// alignment, so the value is undefined rather than infinite.
template <typename Seq>
std::optional<std::size_t> substitution_distance_impl(const Seq& d, const Seq& g) {
    if (d.size() != g.size()) return std::nullopt;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d[i] != g[i]) ++n;
    return n;
}

template <typename T>
std::optional<std::size_t> substitution_distance(const std::vector<T>& d, const std::vector<T>& g) {
    return substitution_distance_impl(d, g);
}

inline std::optional<std::size_t> substitution_distance(std::string_view d, std::string_view g) {
    return substitution_distance_impl(d, g);
}

// Character error rate: summed edit operations over summed reference length.
inline double cer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size())
        throw ShapeMismatch("cer refs " + std::to_string(refs.size()) + " vs hyps " +
                            std::to_string(hyps.size()));
    std::size_t ops = 0, chars = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        ops += edit_distance(std::string_view(refs[i]), std::string_view(hyps[i])).total();
        chars += refs[i].size();
    }
    if (chars == 0) throw EmptyReference("cer needs at least one reference character");
    return static_cast<double>(ops) / static_cast<double>(chars);
}

// Word error rate: same as cer over whitespace-separated word tokens.
inline double wer(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size())
        throw ShapeMismatch("wer refs " + std::to_string(refs.size()) + " vs hyps " +
                            std::to_string(hyps.size()));
    std::size_t ops = 0, words = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        auto rw = detail::split_words(refs[i]);
        auto hw = detail::split_words(hyps[i]);
        ops += edit_distance(rw, hw).total();
        words += rw.size();
    }
    if (words == 0) throw EmptyReference("wer needs at least one reference word");
    return static_cast<double>(ops) / static_cast<double>(words);
}

}  // namespace xmtl
