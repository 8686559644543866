//! Corpora: a seeded synthetic street-scene grammar, ingestion of label-map
//! files, and directories of BLM files.

use std::fmt::Write as _;
use std::ops::{Range, RangeInclusive};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blm::{extract_blm, format_blm, parse_header, read_blm, tokens, Blm, ClassId, SegmentMap};
use crate::error::{Error, Result};

pub const SKY: ClassId = ClassId(0);
pub const TREE: ClassId = ClassId(1);
pub const ROAD: ClassId = ClassId(2);
pub const SIDEWALK: ClassId = ClassId(3);
pub const CAR: ClassId = ClassId(4);
pub const PERSON: ClassId = ClassId(5);

/// Class names of the synthetic vocabulary, indexed by class id.
pub const SCENE_CLASSES: [&str; 6] = ["sky", "tree", "road", "sidewalk", "car", "person"];

pub const MANIFEST: &str = "classes.txt";
const SEG_MAGIC: &str = "SEGv1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Equally shaped grids sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Blm>,
    split: Split,
}

impl Dataset {
    pub fn new(items: Vec<Blm>, split: Split) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let shape = (first.rows(), first.cols(), first.num_classes());
        if let Some(b) = items.iter().find(|b| (b.rows(), b.cols(), b.num_classes()) != shape) {
            return Err(Error::ShapeMismatch(format!(
                "dataset mixes {}x{} ({} classes) with {}x{} ({} classes)",
                shape.0,
                shape.1,
                shape.2,
                b.rows(),
                b.cols(),
                b.num_classes()
            )));
        }
        Ok(Self { items, split })
    }

    pub fn items(&self) -> &[Blm] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Blm> {
        self.items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.items[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.items[0].cols()
    }

    pub fn num_classes(&self) -> usize {
        self.items[0].num_classes()
    }
}

/// Layered street scene: sky, a tree line, sidewalk and road bands from top
/// to bottom, with cars on the road and persons on the sidewalk.
///
/// Boundaries are the first row of the band below them and are drawn
/// uniformly from their ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrammar {
    pub rows: usize,
    pub cols: usize,
    pub sky_tree: RangeInclusive<usize>,
    pub tree_sidewalk: RangeInclusive<usize>,
    pub sidewalk_road: RangeInclusive<usize>,
    /// Mean number of tree runs poking into the last sky row.
    pub tree_rate: f64,
    /// Mean number of 1x2 cars in the road band.
    pub car_rate: f64,
    /// Mean number of single-cell persons in the sidewalk band.
    pub person_rate: f64,
    pub seed: u64,
}

impl Default for SceneGrammar {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            sky_tree: 3..=7,
            tree_sidewalk: 8..=9,
            sidewalk_road: 10..=11,
            tree_rate: 1.0,
            car_rate: 1.5,
            person_rate: 1.0,
            seed: 0,
        }
    }
}

impl SceneGrammar {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGrammar(m));
        if self.cols < 2 {
            return bad(format!("{} columns cannot hold a 1x2 car", self.cols));
        }
        for (name, r) in [("sky/tree", &self.sky_tree), ("tree/sidewalk", &self.tree_sidewalk), ("sidewalk/road", &self.sidewalk_road)] {
            if r.is_empty() {
                return bad(format!("{name} boundary range {r:?} is empty"));
            }
        }
        if *self.sky_tree.start() == 0 {
            return bad("the sky band needs at least one row".into());
        }
        if self.sky_tree.end() >= self.tree_sidewalk.start() || self.tree_sidewalk.end() >= self.sidewalk_road.start() {
            return bad("band boundaries must be strictly increasing".into());
        }
        if *self.sidewalk_road.end() >= self.rows {
            return bad(format!("road band would be empty in a {}-row grid", self.rows));
        }
        for (name, rate) in [("tree", self.tree_rate), ("car", self.car_rate), ("person", self.person_rate)] {
            if !(rate >= 0.0) || !rate.is_finite() {
                return bad(format!("{name} rate {rate} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Band boundaries of one generated scene.
    fn sample_bands(&self, rng: &mut ChaCha8Rng) -> [usize; 3] {
        [
            rng.gen_range(self.sky_tree.clone()),
            rng.gen_range(self.tree_sidewalk.clone()),
            rng.gen_range(self.sidewalk_road.clone()),
        ]
    }

    fn generate(&self, rng: &mut ChaCha8Rng) -> Scene {
        let (rows, cols) = (self.rows, self.cols);
        let [b1, b2, b3] = self.sample_bands(rng);
        let mut classes: Vec<usize> = (0..rows * cols)
            .map(|p| match p / cols {
                r if r < b1 => SKY.0,
                r if r < b2 => TREE.0,
                r if r < b3 => SIDEWALK.0,
                _ => ROAD.0,
            })
            .collect();
        for _ in 0..poisson(rng, self.tree_rate) {
            let len = rng.gen_range(1..=4.min(cols));
            let start = rng.gen_range(0..=cols - len);
            for c in start..start + len {
                classes[(b1 - 1) * cols + c] = TREE.0;
            }
        }
        for _ in 0..poisson(rng, self.car_rate) {
            let r = rng.gen_range(b3..rows);
            let c = rng.gen_range(0..cols - 1);
            classes[r * cols + c] = CAR.0;
            classes[r * cols + c + 1] = CAR.0;
        }
        for _ in 0..poisson(rng, self.person_rate) {
            let r = rng.gen_range(b2..b3);
            let c = rng.gen_range(0..cols);
            classes[r * cols + c] = PERSON.0;
        }
        Scene {
            blm: Blm::from_classes(rows, cols, SCENE_CLASSES.len(), &classes).expect("valid by construction"),
            boundaries: [b1, b2, b3],
        }
    }
}

/// A generated grid with the band boundaries it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub blm: Blm,
    /// First row of the tree, sidewalk and road bands.
    pub boundaries: [usize; 3],
}

impl Scene {
    /// Row ranges of the sky, tree, sidewalk and road bands.
    pub fn bands(&self) -> [Range<usize>; 4] {
        let [b1, b2, b3] = self.boundaries;
        [0..b1, b1..b2, b2..b3, b3..self.blm.rows()]
    }
}

/// Inverse-CDF Poisson draw.
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let u: f64 = rng.gen();
    let mut k = 0;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        if p == 0.0 && cdf < u {
            break;
        }
    }
    k
}

/// `n` scenes drawn deterministically from `grammar.seed`.
pub fn synth_dataset(grammar: &SceneGrammar, n: usize) -> Result<Dataset> {
    let items = synth_scenes(grammar, n)?.into_iter().map(|s| s.blm).collect();
    Dataset::new(items, Split::Train)
}

/// [`synth_dataset`] keeping each scene's band boundaries.
pub fn synth_scenes(grammar: &SceneGrammar, n: usize) -> Result<Vec<Scene>> {
    grammar.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grammar.seed);
    Ok((0..n).map(|_| grammar.generate(&mut rng)).collect())
}

pub fn format_segment_map(map: &SegmentMap) -> String {
    let mut out = String::with_capacity(map.height() * map.width() * 3 + 32);
    let _ = writeln!(out, "{SEG_MAGIC} {} {} {}", map.height(), map.width(), map.num_classes());
    for r in 0..map.height() {
        for c in 0..map.width() {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", map.pixel(r, c).0);
        }
        out.push('\n');
    }
    out
}

/// Parses the `SEGv1` label-map format.
pub fn parse_segment_map(text: &str) -> Result<SegmentMap> {
    let mut lines = text.split('\n');
    let [height, width, num_classes] = parse_header(lines.next(), SEG_MAGIC)?;
    if height == 0 || width == 0 {
        return Err(Error::parse(1, 1, "map dimensions must be positive"));
    }
    let mut pixels = Vec::with_capacity(height * width);
    for r in 0..height {
        let line_no = r + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, 1, format!("expected {height} rows, found {r}")))?;
        let mut count = 0;
        for (col, tok) in tokens(line) {
            if count == width {
                return Err(Error::parse(line_no, col, format!("row has more than {width} pixels")));
            }
            let id: usize = tok
                .parse()
                .map_err(|_| Error::parse(line_no, col, format!("invalid class id {tok:?}")))?;
            if id >= num_classes {
                return Err(Error::parse(line_no, col, format!("class {id} outside vocabulary of {num_classes}")));
            }
            pixels.push(ClassId(id));
            count += 1;
        }
        if count != width {
            return Err(Error::parse(line_no, line.len() + 1, format!("row has {count} pixels, expected {width}")));
        }
    }
    for (i, line) in lines.enumerate() {
        if !line.trim().is_empty() {
            return Err(Error::parse(height + 2 + i, 1, "trailing content after map"));
        }
    }
    SegmentMap::new(height, width, num_classes, pixels)
}

pub fn read_segment_map(path: impl AsRef<Path>) -> Result<SegmentMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_segment_map(&text).map_err(|e| e.in_file(path))
}

/// Class names from a manifest, one per non-empty line.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_manifest(names: &[impl AsRef<str>], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n.as_ref());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Files in `dir` with the given extension, in lexicographic name order.
fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Result of ingesting a directory; files that failed are listed with
/// their error rather than aborting the run.
#[derive(Debug)]
pub struct Ingested {
    pub dataset: Dataset,
    pub class_names: Vec<String>,
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Pools every `*.seg` label map in `dir` to `rows x cols`; the vocabulary
/// comes from `classes.txt` in the same directory.
pub fn ingest_label_maps(dir: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Ingested> {
    let dir = dir.as_ref();
    let class_names = read_manifest(dir.join(MANIFEST))?;
    let nc = class_names.len();
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for path in files_with_extension(dir, "seg")? {
        let pooled = read_segment_map(&path).and_then(|map| {
            if map.num_classes() != nc {
                return Err(Error::ClassCountMismatch {
                    expected: nc,
                    found: map.num_classes(),
                }
                .in_file(&path));
            }
            extract_blm(&map, rows, cols).map_err(|e| e.in_file(&path))
        });
        match pooled {
            Ok(blm) => items.push(blm),
            Err(e) => skipped.push((path, e)),
        }
    }
    Ok(Ingested {
        dataset: Dataset::new(items, Split::Train)?,
        class_names,
        skipped,
    })
}

/// Writes one zero-padded `.blm` file per grid plus the class manifest.
pub fn write_blm_dir(dir: impl AsRef<Path>, blms: &[Blm], class_names: &[impl AsRef<str>]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let width = blms.len().saturating_sub(1).to_string().len().max(6);
    for (i, blm) in blms.iter().enumerate() {
        let path = dir.join(format!("{i:0width$}.blm"));
        std::fs::write(&path, format_blm(blm)).map_err(|e| Error::from(e).in_file(&path))?;
    }
    write_manifest(class_names, dir.join(MANIFEST))
}

/// Reads every `.blm` file of a directory in name order, with the class names
/// from its manifest if present.
pub fn load_blm_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Option<Vec<String>>)> {
    let dir = dir.as_ref();
    let items = files_with_extension(dir, "blm")?
        .iter()
        .map(read_blm)
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(items, Split::Train)?;
    let manifest = dir.join(MANIFEST);
    let names = if manifest.is_file() {
        let names = read_manifest(&manifest)?;
        if names.len() != dataset.num_classes() {
            return Err(Error::ClassCountMismatch {
                expected: names.len(),
                found: dataset.num_classes(),
            }
            .in_file(manifest));
        }
        Some(names)
    } else {
        None
    };
    Ok((dataset, names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rows_of(blm: &Blm) -> Vec<Vec<usize>> {
        (0..blm.rows())
            .map(|r| (0..blm.cols()).map(|c| blm.get(r, c).class().unwrap().0).collect())
            .collect()
    }

    /// First row whose cells all satisfy `pred`.
    fn band_start(blm: &Blm, pred: impl Fn(usize) -> bool) -> Option<usize> {
        rows_of(blm).iter().position(|row| row.iter().all(|&c| pred(c)))
    }

    #[test]
    fn scene_bands_match_cells() {
        for scene in synth_scenes(&SceneGrammar::default(), 100).unwrap() {
            let [sky, tree, sidewalk, road] = scene.bands();
            for c in 0..scene.blm.cols() {
                assert_eq!(scene.blm.get(0, c).class(), Some(SKY));
                assert_eq!(scene.blm.get(tree.start, c).class(), Some(TREE));
                assert!(matches!(scene.blm.get(sidewalk.start, c).class(), Some(SIDEWALK | PERSON)));
                assert!(matches!(scene.blm.get(road.end - 1, c).class(), Some(ROAD | CAR)));
            }
            assert!(!sky.is_empty());
        }
    }

    #[test]
    fn zero_rates_give_pure_bands() {
        let g = SceneGrammar {
            tree_rate: 0.0,
            car_rate: 0.0,
            person_rate: 0.0,
            seed: 3,
            ..SceneGrammar::default()
        };
        for blm in synth_dataset(&g, 50).unwrap().items() {
            let rows = rows_of(blm);
            for row in &rows {
                assert!(row.iter().all(|&c| c == row[0]));
            }
            let order: Vec<usize> = rows.iter().map(|r| r[0]).collect();
            let mut dedup = order.clone();
            dedup.dedup();
            assert_eq!(dedup, vec![SKY.0, TREE.0, SIDEWALK.0, ROAD.0]);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let g = SceneGrammar {
            seed: 9,
            ..SceneGrammar::default()
        };
        assert_eq!(synth_dataset(&g, 20).unwrap(), synth_dataset(&g, 20).unwrap());
        let other = SceneGrammar { seed: 10, ..g };
        assert_ne!(synth_dataset(&other, 20).unwrap(), synth_dataset(&SceneGrammar { seed: 9, ..other.clone() }, 20).unwrap());
    }

    #[test]
    fn objects_stay_in_their_bands() {
        let g = SceneGrammar {
            seed: 1,
            ..SceneGrammar::default()
        };
        for blm in synth_dataset(&g, 1000).unwrap().items() {
            let rows = rows_of(blm);
            // The sidewalk band is the run of rows consisting only of sidewalk
            // and person cells; the road band is everything below it.
            let sidewalk = band_start(blm, |c| c == SIDEWALK.0 || c == PERSON.0).expect("sidewalk band");
            let road = (sidewalk..blm.rows())
                .find(|&r| rows[r].iter().all(|&c| c == ROAD.0 || c == CAR.0))
                .expect("road band");
            for (r, row) in rows.iter().enumerate() {
                for (c, &class) in row.iter().enumerate() {
                    if class == PERSON.0 {
                        assert!((sidewalk..road).contains(&r), "person at ({r},{c})");
                    }
                    if class == CAR.0 {
                        assert!(r >= road, "car at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn bad_grammars_rejected() {
        let overlapping = SceneGrammar {
            tree_sidewalk: 5..=9,
            ..SceneGrammar::default()
        };
        assert!(matches!(synth_dataset(&overlapping, 1), Err(Error::InvalidGrammar(_))));
        let negative = SceneGrammar {
            car_rate: -1.0,
            ..SceneGrammar::default()
        };
        assert!(matches!(synth_dataset(&negative, 1), Err(Error::InvalidGrammar(_))));
        let too_short = SceneGrammar {
            rows: 11,
            ..SceneGrammar::default()
        };
        assert!(matches!(synth_dataset(&too_short, 1), Err(Error::InvalidGrammar(_))));
    }

    #[test]
    fn poisson_mean_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let mean = (0..n).map(|_| poisson(&mut rng, 1.5)).sum::<usize>() as f64 / n as f64;
        assert!((mean - 1.5).abs() < 0.05, "{mean}");
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }

    #[test]
    fn segment_map_text_round_trip() {
        let map = SegmentMap::new(2, 3, 4, [0, 1, 2, 3, 3, 1].map(ClassId).to_vec()).unwrap();
        let text = format_segment_map(&map);
        assert_eq!(text, "SEGv1 2 3 4\n0 1 2\n3 3 1\n");
        assert_eq!(parse_segment_map(&text).unwrap(), map);
        assert!(matches!(parse_segment_map("SEGv1 1 1 2\n2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_segment_map("BLMv1 1 1 2\n0\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn segment_maps_round_trip(h in 1usize..6, w in 1usize..6, nc in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let px: Vec<ClassId> = (0..h * w).map(|_| ClassId(rng.gen_range(0..nc))).collect();
            let map = SegmentMap::new(h, w, nc, px).unwrap();
            prop_assert_eq!(parse_segment_map(&format_segment_map(&map)).unwrap(), map);
        }
    }

    #[test]
    fn ingest_constant_map() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&SCENE_CLASSES, dir.path().join(MANIFEST)).unwrap();
        let map = SegmentMap::new(64, 64, 6, vec![ClassId(3); 64 * 64]).unwrap();
        std::fs::write(dir.path().join("a.seg"), format_segment_map(&map)).unwrap();
        let out = ingest_label_maps(dir.path(), 8, 8).unwrap();
        assert_eq!(out.dataset.len(), 1);
        assert_eq!(out.dataset.items()[0], Blm::filled(8, 8, 6, ClassId(3)).unwrap());
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn ingest_skips_bad_files_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&["a", "b", "c"], dir.path().join(MANIFEST)).unwrap();
        std::fs::write(dir.path().join("b.seg"), "SEGv1 2 2 3\n1 1\n1 1\n").unwrap();
        std::fs::write(dir.path().join("a.seg"), "SEGv1 2 2 3\n0 0\n0 2\n").unwrap();
        std::fs::write(dir.path().join("c.seg"), "SEGv1 2 2 3\n0 5\n0 0\n").unwrap();
        std::fs::write(dir.path().join("d.seg"), "SEGv1 2 2 4\n0 0\n0 0\n").unwrap();
        std::fs::write(dir.path().join("e.seg"), "SEGv1 3 3 3\n0 0 0\n0 0 0\n0 0 0\n").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let out = ingest_label_maps(dir.path(), 2, 2).unwrap();
        let classes: Vec<_> = out.dataset.items().iter().map(|b| b.get(0, 0)).collect();
        assert_eq!(classes, vec![crate::Cell::Known(ClassId(0)), crate::Cell::Known(ClassId(1))]);
        let skipped: Vec<_> = out.skipped.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(skipped, vec!["c.seg", "d.seg", "e.seg"]);
        assert!(matches!(&out.skipped[2].1, Error::File { source, .. } if matches!(**source, Error::DimensionMismatch { .. })));
        let again = ingest_label_maps(dir.path(), 2, 2).unwrap();
        assert_eq!(again.dataset, out.dataset);
    }

    #[test]
    fn ingest_empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&["a"], dir.path().join(MANIFEST)).unwrap();
        assert!(matches!(ingest_label_maps(dir.path(), 1, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn blm_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(&SceneGrammar::default(), 12).unwrap();
        write_blm_dir(dir.path(), data.items(), &SCENE_CLASSES).unwrap();
        let (back, names) = load_blm_dir(dir.path()).unwrap();
        assert_eq!(back.items(), data.items());
        assert_eq!(names.unwrap(), SCENE_CLASSES.map(String::from).to_vec());
        assert!(dir.path().join("000000.blm").is_file());
    }
}
