//! Reading contracts: hex, raw bytes, assembly text, or Solidity through
//! an external compiler.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use primitive_types::U256;
use serde_json::Value;

use crate::evm::{assemble, decode, parse_hex, Opcode};
use crate::meter::keccak256;

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{0}")]
    Abi(String),
    #[error("compiler failed ({status}): {stderr}")]
    Compiler { status: String, stderr: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedContract {
    /// File path, with `:Name` for compiler output.
    pub label: String,
    pub code: Vec<u8>,
    pub names: BTreeMap<[u8; 4], String>,
    pub creation_stripped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Hex,
    Binary,
    Assembly,
}

pub fn detect_format(bytes: &[u8]) -> Format {
    let Ok(text) = std::str::from_utf8(bytes) else { return Format::Binary };
    let compact: String = text.split_whitespace().collect();
    let body = compact.strip_prefix("0x").unwrap_or(&compact);
    if body.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Format::Hex;
    }
    let first = text
        .lines()
        .map(|l| l.split(['#', ';']).next().unwrap_or("").trim())
        .find(|l| !l.is_empty())
        .and_then(|l| l.split_whitespace().find(|t| !t.ends_with(':')));
    match first {
        Some(tok) if Opcode::from_mnemonic(&tok.to_ascii_uppercase()).is_some() => Format::Assembly,
        _ => Format::Binary,
    }
}

/// Format named by a file extension, if any.
pub fn format_of_extension(path: &str) -> Option<Format> {
    match Path::new(path).extension()?.to_str()? {
        "hex" | "bin-runtime" => Some(Format::Hex),
        "asm" | "evm" => Some(Format::Assembly),
        _ => None,
    }
}

pub fn parse_bytecode(path: &str, bytes: &[u8]) -> Result<Vec<u8>, InputError> {
    let err = |message: String| InputError::Format { path: path.to_string(), message };
    let format = format_of_extension(path).unwrap_or_else(|| detect_format(bytes));
    if format != Format::Binary && std::str::from_utf8(bytes).is_err() {
        return Err(err("not valid UTF-8 text".into()));
    }
    match format {
        Format::Hex => parse_hex(std::str::from_utf8(bytes).unwrap()).map_err(|e| err(e.to_string())),
        Format::Binary => Ok(bytes.to_vec()),
        Format::Assembly => assemble(std::str::from_utf8(bytes).unwrap()).map_err(err),
    }
}

/// If `code` looks like creation code that copies and returns a runtime
/// part, that part.
pub fn strip_creation(code: &[u8]) -> Option<Vec<u8>> {
    let prog = decode(code);
    let ins = &prog.instructions;
    for (i, cc) in ins.iter().enumerate() {
        if cc.opcode != Opcode::Codecopy {
            continue;
        }
        // replay the straight-line run leading to CODECOPY
        let start = ins[..i]
            .iter()
            .rposition(|x| x.opcode.info().is_terminator || x.opcode == Opcode::Jumpdest || x.opcode == Opcode::Jumpi)
            .map_or(0, |p| p + 1);
        let mut stack: Vec<Option<U256>> = Vec::new();
        for x in &ins[start..i] {
            let info = x.opcode.info();
            if let Some(v) = x.push_value() {
                stack.push(Some(v));
            } else if let Some(n) = dup_depth(x.opcode) {
                let v = stack.len().checked_sub(n).and_then(|k| stack.get(k).copied()).flatten();
                stack.push(v);
            } else if let Some(n) = swap_depth(x.opcode) {
                let len = stack.len();
                if len > n {
                    stack.swap(len - 1, len - 1 - n);
                } else {
                    stack.push(None);
                }
            } else {
                for _ in 0..info.stack_pops {
                    stack.pop();
                }
                for _ in 0..info.stack_pushes {
                    stack.push(None);
                }
            }
        }
        let top = |k: usize| stack.len().checked_sub(k + 1).and_then(|j| stack[j]);
        let (Some(off), Some(len)) = (top(1), top(2)) else { continue };
        if off > U256::from(code.len()) || len > U256::from(code.len()) {
            continue;
        }
        let (off, len) = (off.as_usize(), len.as_usize());
        let returns = ins[i + 1..].iter().take(6).any(|x| x.opcode == Opcode::Return);
        if returns && off > cc.offset && len > 0 && off + len <= code.len() {
            return Some(code[off..off + len].to_vec());
        }
    }
    None
}

fn dup_depth(op: Opcode) -> Option<usize> {
    let b = op.byte();
    (0x80..=0x8f).contains(&b).then(|| (b - 0x7f) as usize)
}

fn swap_depth(op: Opcode) -> Option<usize> {
    let b = op.byte();
    (0x90..=0x9f).contains(&b).then(|| (b - 0x8f) as usize)
}

fn canonical_type(p: &Value) -> String {
    let ty = p.get("type").and_then(Value::as_str).unwrap_or("");
    match ty.strip_prefix("tuple") {
        Some(suffix) => {
            let inner: Vec<String> = p
                .get("components")
                .and_then(Value::as_array)
                .map(|cs| cs.iter().map(canonical_type).collect())
                .unwrap_or_default();
            format!("({}){suffix}", inner.join(","))
        }
        None => ty.to_string(),
    }
}

pub fn selector(signature: &str) -> [u8; 4] {
    let h = keccak256(signature.as_bytes());
    [h[0], h[1], h[2], h[3]]
}

/// Selector to function name for every function in a JSON ABI.
pub fn abi_names(text: &str) -> Result<BTreeMap<[u8; 4], String>, InputError> {
    let v: Value = serde_json::from_str(text).map_err(|e| InputError::Abi(e.to_string()))?;
    let items = v.as_array().ok_or_else(|| InputError::Abi("ABI is not a JSON array".into()))?;
    let mut out = BTreeMap::new();
    for it in items {
        if it.get("type").and_then(Value::as_str).unwrap_or("function") != "function" {
            continue;
        }
        let Some(name) = it.get("name").and_then(Value::as_str) else { continue };
        let inputs: Vec<String> =
            it.get("inputs").and_then(Value::as_array).map(|a| a.iter().map(canonical_type).collect()).unwrap_or_default();
        out.insert(selector(&format!("{name}({})", inputs.join(","))), name.to_string());
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, InputError> {
    std::fs::read(path).map_err(|source| InputError::Io { path: path.display().to_string(), source })
}

/// Loads one bytecode file, stripping creation code unless `runtime`.
pub fn load_file(path: &Path, runtime: bool) -> Result<LoadedContract, InputError> {
    let label = path.display().to_string();
    let code = parse_bytecode(&label, &read(path)?)?;
    let stripped = if runtime { None } else { strip_creation(&code) };
    Ok(LoadedContract {
        label,
        creation_stripped: stripped.is_some(),
        code: stripped.unwrap_or(code),
        names: BTreeMap::new(),
    })
}

/// Compiles `source` with an external solc and returns every contract's
/// runtime code and ABI names.
pub fn compile(solc: &Path, source: &Path) -> Result<Vec<LoadedContract>, InputError> {
    let out = Command::new(solc)
        .arg("--bin-runtime")
        .arg("--abi")
        .arg(source)
        .output()
        .map_err(|e| InputError::Compiler { status: "not started".into(), stderr: e.to_string() })?;
    if !out.status.success() {
        return Err(InputError::Compiler {
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    parse_solc_output(&source.display().to_string(), &String::from_utf8_lossy(&out.stdout))
}

pub fn parse_solc_output(path: &str, text: &str) -> Result<Vec<LoadedContract>, InputError> {
    let mut out = Vec::new();
    for section in text.split("=======").skip(1).collect::<Vec<_>>().chunks(2) {
        let [header, body] = section else { continue };
        let name = header.trim().rsplit(':').next().unwrap_or("").to_string();
        if name.is_empty() {
            continue;
        }
        let mut lines = body.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut code = Vec::new();
        let mut names = BTreeMap::new();
        while let Some(l) = lines.next() {
            if l.starts_with("Binary of the runtime part") {
                if let Some(h) = lines.next() {
                    code = parse_hex(h).map_err(|e| InputError::Format { path: path.into(), message: e.to_string() })?;
                }
            } else if l.starts_with("Contract JSON ABI") {
                if let Some(a) = lines.next() {
                    names = abi_names(a)?;
                }
            }
        }
        out.push(LoadedContract { label: format!("{path}:{name}"), code, names, creation_stripped: false });
    }
    Ok(out)
}

/// Expands directories into their files, sorted.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, InputError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let rd = std::fs::read_dir(p).map_err(|source| InputError::Io { path: p.display().to_string(), source })?;
            let mut files: Vec<PathBuf> = rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_selector() {
        assert_eq!(hex::encode(selector("transfer(address,uint256)")), "a9059cbb");
    }

    #[test]
    fn abi_with_tuple() {
        let abi = r#"[{"type":"function","name":"f","inputs":[{"type":"tuple","components":[{"type":"uint256"},{"type":"address"}]}]},
                      {"type":"event","name":"E","inputs":[]}, {"type":"function","name":"totalSupply","inputs":[]}]"#;
        let m = abi_names(abi).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[&selector("f((uint256,address))")], "f");
        assert_eq!(m[&[0x18, 0x16, 0x0d, 0xdd]], "totalSupply");
    }

    #[test]
    fn formats() {
        assert_eq!(detect_format(b"0x6001600201\n"), Format::Hex);
        assert_eq!(detect_format(b"PUSH1 1\nSTOP"), Format::Assembly);
        assert_eq!(detect_format(&[0x60, 0x01, 0xff, 0xfe]), Format::Binary);
        assert_eq!(parse_bytecode("x", b"push1 1\nstop").unwrap(), vec![0x60, 1, 0]);
        assert!(parse_bytecode("x.hex", b"60zz").is_err());
        assert_eq!(parse_bytecode("x", b"60zz").unwrap(), b"60zz".to_vec());
    }

    #[test]
    fn creation_code_is_stripped() {
        let runtime = [0x60, 0x01, 0x60, 0x02, 0x01, 0x00];
        // PUSH1 len DUP1 PUSH1 off PUSH1 0 CODECOPY PUSH1 0 RETURN STOP
        let mut code = vec![0x60, runtime.len() as u8, 0x80, 0x60, 0x00, 0x60, 0x00, 0x39, 0x60, 0x00, 0xf3, 0x00];
        code[4] = code.len() as u8;
        code.extend(runtime);
        assert_eq!(strip_creation(&code).unwrap(), runtime);
        assert_eq!(strip_creation(&runtime), None);
    }

    #[test]
    fn solc_output() {
        let text = "\n======= a.sol:C =======\nBinary of the runtime part:\n6001\nContract JSON ABI\n[{\"type\":\"function\",\"name\":\"g\",\"inputs\":[]}]\n";
        let cs = parse_solc_output("a.sol", text).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].label, "a.sol:C");
        assert_eq!(cs[0].code, vec![0x60, 1]);
        assert_eq!(cs[0].names.len(), 1);
    }
}
