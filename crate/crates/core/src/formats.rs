//! Line-oriented text formats for datasets and trained models. Floats are
//! written with 17 significant digits so every value reloads bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::calinet::{Activation, Calinet, Layer, NetMode, Network};
use crate::channel::{CalibrationDataset, ChannelPair, ScenarioKind, Snr};
use crate::error::{CalibError, Result};
use crate::numerics::{fmt_f64, CMatrix, C64};

const DATASET_TAG: &str = "# calib-dataset";
const MODEL_TAG: &str = "# calinet-model";
const NETWORK_TAG: &str = "# calinet";

fn parse_err(line: usize, message: impl Into<String>) -> CalibError {
    CalibError::Parse {
        line,
        message: message.into(),
    }
}

/// Numbered, non-blank lines of a reader.
struct Lines<R> {
    inner: std::io::Lines<R>,
    number: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R) -> Self {
        Lines {
            inner: reader.lines(),
            number: 0,
        }
    }

    fn next_line(&mut self) -> Result<Option<(usize, String)>> {
        for line in self.inner.by_ref() {
            self.number += 1;
            let line = line?;
            if !line.trim().is_empty() {
                return Ok(Some((self.number, line)));
            }
        }
        Ok(None)
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, String)> {
        self.next_line()?
            .ok_or_else(|| parse_err(self.number + 1, format!("unexpected end of input, expected {what}")))
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let (no, line) = self.expect_line(what)?;
        let values = line
            .split_whitespace()
            .map(|t| parse_f64(t, no))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(parse_err(
                no,
                format!("{what}: expected {count} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(line, format!("`{token}` is not a number")))
}

/// Splits `<tag> k1=v1 k2=v2 ...` into its fields.
fn parse_header(line: &str, tag: &str, number: usize) -> Result<BTreeMap<String, String>> {
    let rest = line
        .strip_prefix(tag)
        .filter(|r| r.is_empty() || r.starts_with(' '))
        .ok_or_else(|| parse_err(number, format!("expected a `{tag}` header")))?;
    let mut fields = BTreeMap::new();
    for token in rest.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| parse_err(number, format!("malformed header field `{token}`")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(fields)
}

fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str, line: usize) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| parse_err(line, format!("header is missing `{key}`")))
}

fn usize_field(fields: &BTreeMap<String, String>, key: &str, line: usize) -> Result<usize> {
    let v = field(fields, key, line)?;
    v.parse()
        .map_err(|_| parse_err(line, format!("`{key}={v}` is not a nonnegative integer")))
}

fn write_complex<W: Write>(w: &mut W, z: C64) -> Result<()> {
    writeln!(w, "{} {}", fmt_f64(z.re), fmt_f64(z.im))?;
    Ok(())
}

/// Writes a single-SNR dataset: the header, then per pair `H_UL` column-major
/// and `H_DL` row-major, one `re im` line per entry.
pub fn write_dataset<W: Write>(ds: &CalibrationDataset, w: &mut W) -> Result<()> {
    let snr = ds.snr().ok_or_else(|| {
        CalibError::invalid("only datasets with a single SNR can be written")
    })?;
    writeln!(
        w,
        "{DATASET_TAG} M={} N={} P={} scenario={} snr_db={}",
        ds.m,
        ds.n,
        ds.len(),
        ds.scenario,
        fmt_f64(snr.db())
    )?;
    for pair in &ds.pairs {
        for u in 0..ds.n {
            for k in 0..ds.m {
                write_complex(w, pair.h_ul[(k, u)])?;
            }
        }
        for &z in pair.h_dl.as_slice() {
            write_complex(w, z)?;
        }
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Noiseless ground truth is not
/// part of the format, so the result has no `truth_dl`.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<CalibrationDataset> {
    let mut lines = Lines::new(reader);
    let (no, header) = lines.expect_line("dataset header")?;
    let fields = parse_header(&header, DATASET_TAG, no)?;
    let m = usize_field(&fields, "M", no)?;
    let n = usize_field(&fields, "N", no)?;
    let p = usize_field(&fields, "P", no)?;
    if m == 0 || n == 0 || p == 0 {
        return Err(parse_err(no, "M, N and P must be positive"));
    }
    let scenario: ScenarioKind = field(&fields, "scenario", no)?
        .parse()
        .map_err(|e: CalibError| parse_err(no, e.to_string()))?;
    let snr_db = parse_f64(field(&fields, "snr_db", no)?, no)?;
    let snr = Snr::from_db(snr_db).map_err(|e| parse_err(no, e.to_string()))?;

    let entry = |lines: &mut Lines<R>| -> Result<C64> {
        let v = lines.floats(2, "complex entry")?;
        Ok(C64::new(v[0], v[1]))
    };
    let mut pairs = Vec::with_capacity(p);
    for _ in 0..p {
        let mut h_ul = CMatrix::zeros(m, n);
        for u in 0..n {
            for k in 0..m {
                h_ul[(k, u)] = entry(&mut lines)?;
            }
        }
        let mut h_dl = CMatrix::zeros(n, m);
        for z in h_dl.as_mut_slice() {
            *z = entry(&mut lines)?;
        }
        pairs.push(ChannelPair { h_ul, h_dl, snr });
    }
    if let Some((extra, _)) = lines.next_line()? {
        return Err(parse_err(extra, format!("trailing data after {p} pairs")));
    }
    CalibrationDataset::new(m, n, scenario, pairs, Vec::new())
}

/// `# calinet L=.. dims=.. activation_out=..`, then per layer the rows of `W`
/// followed by one line holding `b`.
pub fn write_network<W: Write>(net: &Network, w: &mut W) -> Result<()> {
    let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
    writeln!(
        w,
        "{NETWORK_TAG} L={} dims={} activation_out={}",
        net.layers().len(),
        dims.join(","),
        net.output_activation()
    )?;
    let join = |vals: &[f64]| vals.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ");
    for layer in net.layers() {
        for row in layer.weights.chunks(layer.in_dim) {
            writeln!(w, "{}", join(row))?;
        }
        writeln!(w, "{}", join(&layer.bias))?;
    }
    Ok(())
}

fn read_network_from<R: BufRead>(lines: &mut Lines<R>) -> Result<Network> {
    let (no, header) = lines.expect_line("network header")?;
    let fields = parse_header(&header, NETWORK_TAG, no)?;
    let l = usize_field(&fields, "L", no)?;
    let dims = field(&fields, "dims", no)?
        .split(',')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| parse_err(no, format!("bad layer dimension `{d}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if l == 0 || dims.len() != l + 1 {
        return Err(parse_err(
            no,
            format!("L={l} does not match {} dimensions", dims.len()),
        ));
    }
    let out_act: Activation = field(&fields, "activation_out", no)?
        .parse()
        .map_err(|e: CalibError| parse_err(no, e.to_string()))?;
    let mut layers = Vec::with_capacity(l);
    for (i, w) in dims.windows(2).enumerate() {
        let (in_dim, out_dim) = (w[0], w[1]);
        let activation = if i + 1 == l { out_act } else { Activation::Tanh };
        let mut layer = Layer::zeros(in_dim, out_dim, activation);
        for r in 0..out_dim {
            let row = lines.floats(in_dim, "weight row")?;
            layer.weights[r * in_dim..(r + 1) * in_dim].copy_from_slice(&row);
        }
        layer.bias = lines.floats(out_dim, "bias")?;
        layers.push(layer);
    }
    Network::new(layers).map_err(|e| parse_err(no, e.to_string()))
}

pub fn read_network<R: BufRead>(reader: R) -> Result<Network> {
    let mut lines = Lines::new(reader);
    let net = read_network_from(&mut lines)?;
    if let Some((extra, _)) = lines.next_line()? {
        return Err(parse_err(extra, "trailing data after network"));
    }
    Ok(net)
}

/// A model file: a `# calinet-model` header followed by its networks.
pub fn write_model<W: Write>(model: &Calinet, w: &mut W) -> Result<()> {
    writeln!(
        w,
        "{MODEL_TAG} mode={} M={} N={} nets={} target_scale={}",
        model.mode,
        model.m,
        model.n,
        model.nets.len(),
        fmt_f64(model.target_scale)
    )?;
    for net in &model.nets {
        write_network(net, w)?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(reader: R) -> Result<Calinet> {
    let mut lines = Lines::new(reader);
    let (no, header) = lines.expect_line("model header")?;
    let fields = parse_header(&header, MODEL_TAG, no)?;
    let mode: NetMode = field(&fields, "mode", no)?
        .parse()
        .map_err(|e: CalibError| parse_err(no, e.to_string()))?;
    let m = usize_field(&fields, "M", no)?;
    let n = usize_field(&fields, "N", no)?;
    let count = usize_field(&fields, "nets", no)?;
    let scale = parse_f64(field(&fields, "target_scale", no)?, no)?;
    let nets = (0..count)
        .map(|_| read_network_from(&mut lines))
        .collect::<Result<Vec<_>>>()?;
    if let Some((extra, _)) = lines.next_line()? {
        return Err(parse_err(extra, format!("trailing data after {count} networks")));
    }
    Calinet::new(mode, m, n, scale, nets).map_err(|e| parse_err(no, e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))
}

pub fn save_dataset(ds: &CalibrationDataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<CalibrationDataset> {
    read_dataset(open(path)?)
}

pub fn save_model(model: &Calinet, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Calinet> {
    read_model(open(path)?)
}
