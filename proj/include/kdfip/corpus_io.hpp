// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "kdfip/sim.hpp"

namespace kdfip::sim {

struct CorpusFile {
    Corpus corpus;
    std::string config_hash;
    std::string characters;
    std::size_t feature_dim = 0;
};

/// One JSON header line, then per utterance a JSON metadata line followed by
/// T*D little-endian float64 feature values. Layout in docs/formats.md.
std::string encode_corpus(const Corpus &corpus, const VocabSpec &vocab,
                          const std::string &config_hash);
CorpusFile decode_corpus(const std::string &bytes);

void save_corpus(const std::filesystem::path &path, const Corpus &corpus, const VocabSpec &vocab,
                 const std::string &config_hash);
CorpusFile load_corpus(const std::filesystem::path &path);

} // namespace kdfip::sim
