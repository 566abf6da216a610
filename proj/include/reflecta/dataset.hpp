#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "reflecta/error.hpp"
#include "reflecta/nifti.hpp"
#include "reflecta/phantom.hpp"
#include "reflecta/transform_io.hpp"
#include "reflecta/volume.hpp"

namespace reflecta {

// Manifest: tab-separated, one header line
//   id  labels  mask  <channel name>...
// then one row per subject. Relative paths resolve against the manifest's
// directory; "-" marks a missing labels or mask volume.

struct ManifestEntry {
    std::string id;
    std::vector<std::string> channel_names;
    std::vector<std::filesystem::path> channels;
    std::filesystem::path labels, mask;  // empty when absent
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');)
        out.push_back(f);
    return out;
}

} // namespace detail

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw IoError("cannot open manifest " + path.string());
    const auto base = path.parent_path();
    std::string line;
    if (!std::getline(is, line))
        throw FormatError(path.string() + ": empty manifest");
    const auto header = detail::split_tabs(line);
    if (header.size() < 4 || header[0] != "id" || header[1] != "labels" || header[2] != "mask")
        throw FormatError(path.string() + ": header must be 'id<TAB>labels<TAB>mask<TAB><channel>...'");
    auto resolve = [&](const std::string& f) -> std::filesystem::path {
        if (f == "-" || f.empty())
            return {};
        const std::filesystem::path p(f);
        return p.is_absolute() ? p : base / p;
    };
    std::vector<ManifestEntry> out;
    for (int row = 2; std::getline(is, line); ++row) {
        if (line.empty() || line[0] == '#')
            continue;
        const auto f = detail::split_tabs(line);
        if (f.size() != header.size())
            throw FormatError(path.string() + ":" + std::to_string(row) + ": expected " +
                              std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
        ManifestEntry e{f[0], {header.begin() + 3, header.end()}, {}, resolve(f[1]), resolve(f[2])};
        for (std::size_t i = 3; i < f.size(); ++i)
            e.channels.push_back(resolve(f[i]));
        out.push_back(std::move(e));
    }
    if (out.empty())
        throw FormatError(path.string() + ": no subjects listed");
    return out;
}

/// Paths are written relative to the manifest directory when they lie below it.
inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path)
{
    if (entries.empty())
        throw Error("write_manifest: no entries");
    std::ofstream os(path);
    if (!os)
        throw IoError("cannot write manifest " + path.string());
    const auto base = path.parent_path();
    auto rel = [&](const std::filesystem::path& p) {
        if (p.empty())
            return std::string("-");
        const auto r = p.lexically_relative(base.empty() ? "." : base);
        return (r.empty() || *r.begin() == "..") ? p.string() : r.string();
    };
    os << "id\tlabels\tmask";
    for (const auto& n : entries[0].channel_names)
        os << '\t' << n;
    os << '\n';
    for (const auto& e : entries) {
        if (e.channel_names != entries[0].channel_names)
            throw Error("write_manifest: subjects disagree on channel names");
        os << e.id << '\t' << rel(e.labels) << '\t' << rel(e.mask);
        for (const auto& c : e.channels)
            os << '\t' << rel(c);
        os << '\n';
    }
}

inline MultiModalImage load_subject(const ManifestEntry& e)
{
    MultiModalImage im;
    for (std::size_t i = 0; i < e.channels.size(); ++i) {
        im.channels.push_back(nifti::load_nifti(e.channels[i]));
        im.channel_names.push_back(e.channel_names[i]);
    }
    if (!e.labels.empty())
        im.labels = nifti::load_nifti(e.labels);
    if (!e.mask.empty())
        im.brain_mask = nifti::load_nifti(e.mask);
    im.validate();
    return im;
}

/// Writes <dir>/<id>/{<channel>.nii.gz, labels.nii.gz, mask.nii.gz,
/// mirror_field.nii.gz} and returns the manifest row. The mirror field is the
/// ground-truth correspondence as a displacement M(p) - p.
inline ManifestEntry save_phantom_subject(const PhantomSubject& s, const std::filesystem::path& dir)
{
    const auto sub = dir / s.id;
    std::filesystem::create_directories(sub);
    ManifestEntry e{s.id, s.image.channel_names, {}, {}, {}};
    for (std::size_t i = 0; i < s.image.channels.size(); ++i) {
        e.channels.push_back(sub / (s.image.channel_names[i] + ".nii.gz"));
        nifti::save_nifti(s.image.channels[i], e.channels.back());
    }
    if (s.image.labels) {
        e.labels = sub / "labels.nii.gz";
        nifti::save_nifti(*s.image.labels, e.labels, nifti::DataType::UInt8);
    }
    if (s.image.brain_mask) {
        e.mask = sub / "mask.nii.gz";
        nifti::save_nifti(*s.image.brain_mask, e.mask, nifti::DataType::UInt8);
    }
    save_field(s.mirror.to_field(s.image.dims()), sub / "mirror_field.nii.gz");
    return e;
}

} // namespace reflecta
