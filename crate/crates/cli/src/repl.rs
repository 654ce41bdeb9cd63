//! Interactive prediction loop: load a scene from a dataset file, type
//! instructions, optionally force-inject one-hot source or operation
//! choices, and inspect the attention map as top-down text art.

use blockworld::analysis::one_hot;
use blockworld::data::{block_name, read_dataset};
use blockworld::model::{Model, OpMode, Prediction, SourceMode};
use blockworld::real::Real;
use blockworld::world::WorldGrid;
use std::io::{BufRead, Write};
use std::path::Path;

const HELP: &str = "\
commands:
  load <dataset-file> [index]   use the world of record <index> (default 0)
  inject source <block-id>      force a one-hot d_a on that block
  inject op <op-index>          force a one-hot d_op on that operation
  clear                         drop forced injections
  help                          this text
  quit | exit                   leave the session
anything else is treated as an instruction for the loaded scene.";

const USAGE_EMPTY: &str =
    "empty instruction; type an instruction, or 'help' for commands";

struct Session<R: Real> {
    model: Model<R>,
    world: Option<WorldGrid>,
    forced_source: Option<usize>,
    forced_op: Option<usize>,
}

/// Drive a session over any line source; the transcript is a pure
/// function of the model and the input lines.
pub fn run<R: Real>(
    model: Model<R>,
    input: impl BufRead,
    out: &mut impl Write,
) -> std::io::Result<()> {
    let mut session = Session {
        model,
        world: None,
        forced_source: None,
        forced_op: None,
    };
    writeln!(out, "blockworld repl; 'help' lists commands")?;
    write!(out, "> ")?;
    out.flush()?;
    for line in input.lines() {
        let line = line?;
        if !handle(&mut session, line.trim(), out)? {
            return Ok(());
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out, "bye")?;
    Ok(())
}

/// Returns false when the session should end.
fn handle<R: Real>(
    session: &mut Session<R>,
    line: &str,
    out: &mut impl Write,
) -> std::io::Result<bool> {
    let mut words = line.split_whitespace();
    match words.next() {
        None => writeln!(out, "{USAGE_EMPTY}")?,
        Some("help") => writeln!(out, "{HELP}")?,
        Some("quit") | Some("exit") => {
            writeln!(out, "bye")?;
            return Ok(false);
        }
        Some("clear") => {
            session.forced_source = None;
            session.forced_op = None;
            writeln!(out, "injections cleared")?;
        }
        Some("load") => {
            let args: Vec<&str> = words.collect();
            match parse_load(&args) {
                Some((path, index)) => load_scene(session, path, index, out)?,
                None => writeln!(out, "{HELP}")?,
            }
        }
        Some("inject") => {
            let args: Vec<&str> = words.collect();
            match parse_inject(&args) {
                Some(("source", id)) => {
                    if id >= 1 && id <= session.model.cfg.num_blocks {
                        session.forced_source = Some(id);
                        writeln!(out, "forcing d_a one-hot on block {id}")?;
                    } else {
                        writeln!(
                            out,
                            "block id {id} outside 1..={}",
                            session.model.cfg.num_blocks
                        )?;
                    }
                }
                Some(("op", k)) => {
                    if k < session.model.cfg.n_op {
                        session.forced_op = Some(k);
                        writeln!(out, "forcing d_op one-hot on operation {k}")?;
                    } else {
                        writeln!(
                            out,
                            "operation {k} outside 0..{}",
                            session.model.cfg.n_op
                        )?;
                    }
                }
                _ => writeln!(out, "{HELP}")?,
            }
        }
        Some(_) => predict_line(session, line, out)?,
    }
    Ok(true)
}

fn parse_load<'a>(args: &[&'a str]) -> Option<(&'a str, usize)> {
    match args {
        [path] => Some((path, 0)),
        [path, index] => index.parse().ok().map(|i| (*path, i)),
        _ => None,
    }
}

fn parse_inject<'a>(args: &[&'a str]) -> Option<(&'a str, usize)> {
    match args {
        [kind @ ("source" | "op"), raw] => raw.parse().ok().map(|n| (*kind, n)),
        _ => None,
    }
}

fn load_scene<R: Real>(
    session: &mut Session<R>,
    path: &str,
    index: usize,
    out: &mut impl Write,
) -> std::io::Result<()> {
    let examples = match read_dataset(Path::new(path)) {
        Ok(ex) => ex,
        Err(e) => {
            writeln!(out, "cannot load {path}: {e}")?;
            return Ok(());
        }
    };
    let Some(example) = examples.get(index) else {
        writeln!(out, "{path} has {} records; index {index} is out of range", examples.len())?;
        return Ok(());
    };
    let world = example.before.clone();
    writeln!(out, "scene {index} of {path}: {} blocks", world.poses().len())?;
    for (id, pose) in world.poses() {
        writeln!(
            out,
            "  block {id} ({}) at x={:.3} y={:.3} z={:.3} theta={:.3}",
            safe_name(*id),
            pose.x,
            pose.y,
            pose.z,
            pose.theta
        )?;
    }
    let blank = vec![0.0; world.dims().numel()];
    writeln!(out, "{}", top_down_art(&world, &blank, None))?;
    session.world = Some(world);
    Ok(())
}

fn safe_name(id: usize) -> &'static str {
    if (1..=26).contains(&id) {
        block_name(id)
    } else {
        "?"
    }
}

fn predict_line<R: Real>(
    session: &mut Session<R>,
    instruction: &str,
    out: &mut impl Write,
) -> std::io::Result<()> {
    let Some(world) = session.world.clone() else {
        writeln!(out, "no scene loaded; use: load <dataset-file> [index]")?;
        return Ok(());
    };
    let source_mode = match session.forced_source {
        Some(id) => SourceMode::GoldOneHot(id),
        None => SourceMode::Model,
    };
    let op_mode = match session.forced_op {
        Some(k) => OpMode::Inject(one_hot(session.model.cfg.n_op, k)),
        None => OpMode::Model,
    };
    match session.model.predict(instruction, &world, source_mode, op_mode) {
        Ok(pred) => print_prediction(&world, &pred, out),
        Err(e) => {
            writeln!(out, "prediction failed: {e}")?;
            Ok(())
        }
    }
}

fn top_k(dist: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut indexed: Vec<(usize, f64)> = dist.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    indexed
}

fn print_prediction(
    world: &WorldGrid,
    pred: &Prediction,
    out: &mut impl Write,
) -> std::io::Result<()> {
    let d_a_line = top_k(&pred.d_a, 3)
        .iter()
        .map(|(i, p)| format!("block {} {:.3}", i + 1, p))
        .collect::<Vec<_>>()
        .join(" | ");
    let d_op_line = top_k(&pred.d_op, 3)
        .iter()
        .map(|(i, p)| format!("op {i} {p:.3}"))
        .collect::<Vec<_>>()
        .join(" | ");
    writeln!(out, "d_a top-3:  {d_a_line}")?;
    writeln!(out, "d_op top-3: {d_op_line}")?;
    writeln!(
        out,
        "source: block {} ({})",
        pred.source,
        safe_name(pred.source)
    )?;
    writeln!(
        out,
        "pose: x={:.6} y={:.6} z={:.6} theta={:.6}",
        pred.x, pred.y, pred.z, pred.theta
    )?;
    writeln!(
        out,
        "{}",
        top_down_art(world, &pred.attention, Some((pred.x, pred.y)))
    )?;
    Ok(())
}

/// Shading ramp for attention, lightest to darkest.
const RAMP: &[u8] = b" .:-=+*#%";

/// Top-down text art: north at the top, block ids as base-36 digits, the
/// predicted target as 'X', and attention (max over depth, 0..10) as
/// background shading.
fn top_down_art(world: &WorldGrid, attention: &[f64], target: Option<(f64, f64)>) -> String {
    let dims = world.dims();
    let target_cell = target.map(|(x, y)| {
        (
            (y.ceil() as isize - 1).clamp(0, dims.h as isize - 1) as usize,
            (x.ceil() as isize - 1).clamp(0, dims.w as isize - 1) as usize,
        )
    });
    let mut art = String::new();
    art.push(' ');
    art.push_str(&"-".repeat(dims.w));
    art.push('\n');
    for row in (0..dims.h).rev() {
        art.push('|');
        for col in 0..dims.w {
            let mut cell = None;
            let mut peak = 0.0f64;
            for layer in (0..dims.d).rev() {
                let flat = dims.flat(layer, row, col);
                let id = world.ids()[flat];
                if cell.is_none() && id != 0 {
                    cell = Some(std::char::from_digit(id as u32 % 36, 36).unwrap_or('?'));
                }
                peak = peak.max(attention[flat]);
            }
            let glyph = if target_cell == Some((row, col)) {
                'X'
            } else if let Some(c) = cell {
                c
            } else {
                let shade = ((peak / 10.0).clamp(0.0, 1.0) * (RAMP.len() - 1) as f64)
                    .round() as usize;
                RAMP[shade] as char
            };
            art.push(glyph);
        }
        art.push_str("|\n");
    }
    art.push(' ');
    art.push_str(&"-".repeat(dims.w));
    art.push_str("\n west->east, north at top; X target, digits blocks, shading attention");
    art
}
