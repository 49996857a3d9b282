// SPDX-License-Identifier: Apache-2.0
#include "kdfip/corpus_io.hpp"

#include <stdexcept>

#include <json.hpp>

#include "kdfip/io.hpp"

namespace kdfip::sim {

using nlohmann::json;

namespace {

constexpr const char *kFormat = "kdfip-corpus/1";

std::string next_line(const std::string &bytes, std::size_t &pos) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos)
        throw std::runtime_error("corpus file truncated: missing metadata line");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
}

} // namespace

std::string encode_corpus(const Corpus &corpus, const VocabSpec &vocab,
                          const std::string &config_hash) {
    json header = {
        {"format", kFormat},
        {"config_hash", config_hash},
        {"generation_hash", io::hex64(corpus.generation_hash)},
        {"name", corpus.name},
        {"role", to_string(corpus.role)},
        {"split", to_string(corpus.split)},
        {"vocab", {{"characters", vocab.characters}, {"blank", vocab.blank()}, {"dim", vocab.dim()}}},
        {"count", corpus.size()},
    };
    std::string out = header.dump() + "\n";
    for (const auto &u : corpus.utterances) {
        json meta = {
            {"frames", u.frames()},
            {"dim", u.features.cols()},
            {"speaker_id", u.speaker_id},
            {"origin", to_string(u.origin)},
            {"transcript", u.transcript},
            {"frame_labels", u.frame_labels},
            {"substituted", u.substituted_chars},
        };
        out += meta.dump() + "\n";
        io::append_f64_le(out, u.features.data());
    }
    return out;
}

CorpusFile decode_corpus(const std::string &bytes) {
    std::size_t pos = 0;
    const json header = json::parse(next_line(bytes, pos));
    if (header.value("format", "") != kFormat)
        throw std::runtime_error("not a corpus file (format tag mismatch)");
    CorpusFile file;
    file.config_hash = header.at("config_hash").get<std::string>();
    file.characters = header.at("vocab").at("characters").get<std::string>();
    file.feature_dim = header.at("vocab").at("dim").get<std::size_t>();
    Corpus &c = file.corpus;
    c.name = header.at("name").get<std::string>();
    c.role = parse_origin(header.at("role").get<std::string>());
    c.split = parse_split(header.at("split").get<std::string>());
    c.generation_hash = std::stoull(header.at("generation_hash").get<std::string>(), nullptr, 16);
    const auto count = header.at("count").get<std::size_t>();
    c.utterances.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const json meta = json::parse(next_line(bytes, pos));
        Utterance u;
        const auto T = meta.at("frames").get<std::size_t>();
        const auto D = meta.at("dim").get<std::size_t>();
        if (D != file.feature_dim)
            throw std::runtime_error("utterance feature dim differs from header");
        u.features = Tensor({T, D}, io::read_f64_le(bytes, pos, T * D));
        pos += T * D * 8;
        u.speaker_id = meta.at("speaker_id").get<std::uint64_t>();
        u.origin = parse_origin(meta.at("origin").get<std::string>());
        u.transcript = meta.at("transcript").get<std::string>();
        u.frame_labels = meta.at("frame_labels").get<std::vector<Label>>();
        u.substituted_chars = meta.at("substituted").get<std::uint32_t>();
        if (u.frame_labels.size() != T)
            throw std::runtime_error("frame label count differs from frame count");
        c.utterances.push_back(std::move(u));
    }
    if (pos != bytes.size())
        throw std::runtime_error("corpus file has trailing bytes");
    return file;
}

void save_corpus(const std::filesystem::path &path, const Corpus &corpus, const VocabSpec &vocab,
                 const std::string &config_hash) {
    io::atomic_write(path, encode_corpus(corpus, vocab, config_hash));
}

CorpusFile load_corpus(const std::filesystem::path &path) {
    return decode_corpus(io::read_file(path));
}

} // namespace kdfip::sim
