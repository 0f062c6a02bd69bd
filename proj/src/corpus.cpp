// SPDX-License-Identifier: Apache-2.0

#include "copal/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string_view>

#include "copal/binio.hpp"
#include "copal/error.hpp"
#include "copal/rng.hpp"

namespace copal::corpus {

Corpus make_corpus(std::string name, std::vector<TokenId> tokens, double eval_fraction, std::size_t vocab_size) {
    if (tokens.empty()) {
        throw InputError("corpus '" + name + "' is empty");
    }
    if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) {
        throw InputError("eval fraction must lie in [0, 1), got " + std::to_string(eval_fraction));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= vocab_size) {
            throw InputError("corpus '" + name + "': token " + std::to_string(tokens[i]) + " at " + std::to_string(i) +
                             " exceeds vocabulary " + std::to_string(vocab_size));
        }
    }
    const auto eval_len = static_cast<std::size_t>(std::floor(static_cast<double>(tokens.size()) * eval_fraction));
    Corpus c;
    c.name = std::move(name);
    c.calibration_end = tokens.size() - eval_len;
    c.tokens = std::move(tokens);
    return c;
}

Corpus load_corpus(const std::filesystem::path& path, std::string name, double eval_fraction, std::size_t vocab_size) {
    const std::vector<std::uint8_t> bytes = binio::read_file(path);
    if (bytes.empty()) {
        throw InputError("corpus file " + path.string() + " is empty");
    }
    std::vector<TokenId> tokens;
    if (path.extension() == ".tok") {
        if (bytes.size() % 2 != 0) {
            throw FormatError("token file " + path.string() + " has an odd byte count");
        }
        tokens.reserve(bytes.size() / 2);
        for (std::size_t i = 0; i < bytes.size(); i += 2) {
            tokens.push_back(static_cast<TokenId>(bytes[i] | (bytes[i + 1] << 8)));
        }
    } else {
        tokens.assign(bytes.begin(), bytes.end());
    }
    return make_corpus(std::move(name), std::move(tokens), eval_fraction, vocab_size);
}

CalibrationSet sample_calibration(const Corpus& c, std::size_t n_samples, std::size_t seq_len, std::uint64_t seed) {
    if (seq_len < 2) {
        throw InputError("calibration seq_len must be at least 2");
    }
    if (n_samples == 0) {
        throw InputError("calibration needs at least one sample");
    }
    const auto range = c.calibration();
    if (range.size() < seq_len) {
        throw InputError("corpus '" + c.name + "': calibration range of " + std::to_string(range.size()) +
                         " tokens is shorter than seq_len " + std::to_string(seq_len));
    }
    const std::size_t valid_offsets = range.size() - seq_len + 1;
    Rng rng(mix_seed(seed, stable_hash(c.name)));
    CalibrationSet out;
    out.corpus_name = c.name;
    out.seq_len = seq_len;
    out.seed = seed;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t off = rng.index(valid_offsets);
        out.offsets.push_back(off);
        out.segments.emplace_back(range.begin() + static_cast<std::ptrdiff_t>(off),
                                  range.begin() + static_cast<std::ptrdiff_t>(off + seq_len));
    }
    return out;
}

std::vector<std::vector<std::string>> permutations(std::vector<std::string> names) {
    if (names.empty() || names.size() > 5) {
        throw InputError("permutations: expected 1 to 5 dataset names, got " + std::to_string(names.size()));
    }
    std::set<std::string> unique(names.begin(), names.end());
    if (unique.size() != names.size()) {
        throw InputError("permutations: duplicate dataset names");
    }
    std::sort(names.begin(), names.end());
    std::vector<std::vector<std::string>> out;
    do {
        out.push_back(names);
    } while (std::next_permutation(names.begin(), names.end()));
    return out;
}

namespace {

// Zipf-like pick: index k drawn with weight 1 / (k + 1).
std::size_t zipf_pick(Rng& rng, std::size_t n) {
    const double h = std::log(static_cast<double>(n) + 1.0);
    const double u = rng.uniform() * h;
    const auto k = static_cast<std::size_t>(std::exp(u) - 1.0);
    return std::min(k, n - 1);
}

constexpr std::array<std::string_view, 96> kWords = {
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on",
    "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they", "you",
    "were", "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when", "will",
    "would", "who", "so", "no", "river", "village", "history", "season", "music", "church", "station", "army",
    "garden", "letter", "winter", "story", "people", "city", "during", "after", "first", "later", "early",
    "known", "became", "small", "large", "north", "south", "between", "under", "through", "another", "several",
    "although", "however", "century", "country", "family", "novel", "author", "company", "building", "record",
    "island", "mountain", "valley", "bridge", "castle", "harbour", "forest"};

constexpr std::array<std::string_view, 24> kKeys = {
    "id", "name", "type", "value", "items", "meta", "tags", "child", "left", "right", "node", "attrs",
    "src", "dst", "weight", "kind", "ref", "args", "body", "op", "lhs", "rhs", "scope", "env"};

constexpr std::array<std::string_view, 12> kCodes = {"AX", "BQ", "CZ", "DK", "EV", "FR", "GL", "HT", "JM", "KP", "LW", "MN"};

void append_word(std::string& out, Rng& rng, bool capitalize) {
    std::string word(kWords[zipf_pick(rng, kWords.size())]);
    if (capitalize) {
        word[0] = static_cast<char>(word[0] - 'a' + 'A');
    }
    out += word;
}

void append_value(std::string& out, Rng& rng, int depth);

void append_object(std::string& out, Rng& rng, int depth) {
    out += '{';
    const std::size_t fields = 1 + rng.index(4);
    for (std::size_t i = 0; i < fields; ++i) {
        if (i > 0) out += ", ";
        out += '"';
        out += kKeys[zipf_pick(rng, kKeys.size())];
        out += "\": ";
        append_value(out, rng, depth + 1);
    }
    out += '}';
}

void append_value(std::string& out, Rng& rng, int depth) {
    const double u = rng.uniform();
    if (depth < 4 && u < 0.25) {
        append_object(out, rng, depth);
    } else if (depth < 4 && u < 0.4) {
        out += '[';
        const std::size_t n = 1 + rng.index(4);
        for (std::size_t i = 0; i < n; ++i) {
            if (i > 0) out += ", ";
            append_value(out, rng, depth + 1);
        }
        out += ']';
    } else if (u < 0.7) {
        out += '"';
        out += kKeys[rng.index(kKeys.size())];
        out += '_';
        out += static_cast<char>('a' + rng.index(26));
        out += '"';
    } else if (u < 0.85) {
        out += std::to_string(rng.index(100));
    } else {
        out += rng.bernoulli(0.5) ? "true" : "null";
    }
}

}  // namespace

std::string generate_prose(std::size_t bytes, std::uint64_t seed) {
    Rng rng(mix_seed(seed, stable_hash("prose")));
    std::string out;
    out.reserve(bytes + 128);
    std::size_t sentences_in_paragraph = 0;
    while (out.size() < bytes) {
        const std::size_t words = 5 + rng.index(11);
        for (std::size_t w = 0; w < words; ++w) {
            if (w > 0) {
                out += (rng.bernoulli(0.08) && w + 1 < words) ? ", " : " ";
            }
            append_word(out, rng, w == 0);
        }
        out += rng.bernoulli(0.1) ? "? " : ". ";
        if (++sentences_in_paragraph >= 4 + rng.index(4)) {
            out += "\n\n";
            sentences_in_paragraph = 0;
        }
    }
    out.resize(bytes);
    return out;
}

std::string generate_structured(std::size_t bytes, std::uint64_t seed) {
    Rng rng(mix_seed(seed, stable_hash("structured")));
    std::string out;
    out.reserve(bytes + 512);
    while (out.size() < bytes) {
        append_object(out, rng, 0);
        out += '\n';
    }
    out.resize(bytes);
    return out;
}

std::string generate_tabular(std::size_t bytes, std::uint64_t seed) {
    Rng rng(mix_seed(seed, stable_hash("tabular")));
    std::string out;
    out.reserve(bytes + 128);
    std::size_t row = 0;
    char buf[96];
    while (out.size() < bytes) {
        if (row % 50 == 0) {
            out += "id,date,region,qty,price,total\n";
        }
        const std::size_t qty = 1 + rng.index(40);
        const double price = std::round(rng.uniform(0.5, 250.0) * 100.0) / 100.0;
        std::snprintf(buf, sizeof(buf), "%zu,20%02zu-%02zu-%02zu,%s,%zu,%.2f,%.2f\n", 1000 + row, 10 + rng.index(15),
                      1 + rng.index(12), 1 + rng.index(28), std::string(kCodes[rng.index(kCodes.size())]).c_str(),
                      qty, price, price * static_cast<double>(qty));
        out += buf;
        ++row;
    }
    out.resize(bytes);
    return out;
}

std::vector<GeneratedCorpus> write_synthetic_corpora(const std::filesystem::path& dir, std::size_t bytes_each,
                                                     std::uint64_t seed) {
    if (bytes_each == 0) {
        throw InputError("write_synthetic_corpora: size must be positive");
    }
    std::filesystem::create_directories(dir);
    const std::array<std::pair<std::string, std::string>, 3> sources = {{
        {"prose", generate_prose(bytes_each, seed)},
        {"structured", generate_structured(bytes_each, seed)},
        {"tabular", generate_tabular(bytes_each, seed)},
    }};
    std::vector<GeneratedCorpus> out;
    for (const auto& [name, text] : sources) {
        const auto path = dir / (name + ".txt");
        binio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
        out.push_back({name, path});
    }
    return out;
}

}  // namespace copal::corpus
